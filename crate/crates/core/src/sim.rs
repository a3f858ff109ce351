//! Scenario runner: miners, subnets and clients wired through [`Network`].
//!
//! A scenario is a TOML file naming the seed, network delays, the SPIR miners
//! and MPIR subnets with their strategies, and a workload. Running it yields a
//! [`SimReport`] with per-operation rows, attack accounting, safety and
//! liveness checks, and the trace digest.
//!
//! The ledger is a single trusted in-process component. Miners append to it
//! while handling a message; clients read it for lookups. The LWE hint is
//! fetched directly from the miner before the query is sent (offline phase).

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aca::Fid;
use crate::client::{
    mpir_finish, mpir_start, spir_finish, spir_start, MpirRetrieval, Outcome, ReplyTally, RetrievalReport,
    SpirRetrieval,
};
use crate::db::LEN_PREFIX;
use crate::hash::{self, Digest};
use crate::ledger::{ChainId, Ledger};
use crate::netsim::{Addr, NetConfig, NetStats, Network, Payload, Traced};
use crate::node::{MinerConfig, Mode, MpirMiner, MultiResponse, QueryError, SpirMiner, Strategy};
use crate::pir_multi::{MultiAnswer, MultiQuery};
use crate::pir_single::{Backend, Hint, SingleAnswer, SingleQuery, SpirParams};
use crate::smr::{max_faulty, ClientRequest, Output, Reply, RequestOutcome, SmrConfig, SmrMsg};

/// Chain id of subnet `s`.
pub const SUBNET_CHAIN_BASE: ChainId = 1000;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("reading scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing scenario: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ScenarioError> {
    Err(ScenarioError::Invalid(msg.into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmrSection {
    pub view_timeout: u64,
    pub max_batch: usize,
}

impl Default for SmrSection {
    fn default() -> Self {
        let d = SmrConfig::default();
        Self { view_timeout: d.view_timeout, max_batch: d.max_batch }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpirMinerSpec {
    #[serde(default)]
    pub strategy: Strategy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubnetSpec {
    /// One entry per replica, in position order.
    pub strategies: Vec<Strategy>,
}

/// Generated workload. Each client owns its files: it uploads them, reads
/// some, deletes some and reads again.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Workload {
    pub clients: u32,
    pub files: u32,
    pub deletes: u32,
    pub retrievals: u32,
    /// Inclusive bounds on file length in bytes.
    pub file_size: [usize; 2],
    /// Fraction of uploads sent to subnets rather than single miners.
    pub mpir_share: f64,
}

impl Default for Workload {
    fn default() -> Self {
        Self { clients: 2, files: 8, deletes: 2, retrievals: 8, file_size: [4, 24], mpir_share: 0.5 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpKind {
    Upload,
    Delete,
    Retrieve,
}

/// An explicit operation. `target` is `spir:<miner>` or `subnet:<index>` and
/// only applies to uploads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpSpec {
    pub client: u32,
    pub op: OpKind,
    pub file: String,
    #[serde(default)]
    pub target: Option<String>,
    /// Upload content; defaults to bytes derived from the file name.
    #[serde(default)]
    pub content: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    pub seed: u64,
    #[serde(default = "default_record_len")]
    pub record_len: usize,
    #[serde(default)]
    pub network: NetConfig,
    #[serde(default)]
    pub smr: SmrSection,
    #[serde(default)]
    pub spir: SpirParams,
    #[serde(default)]
    pub spir_miners: Vec<SpirMinerSpec>,
    #[serde(default)]
    pub subnets: Vec<SubnetSpec>,
    #[serde(default)]
    pub workload: Option<Workload>,
    #[serde(default)]
    pub ops: Vec<OpSpec>,
    #[serde(default = "default_max_ticks")]
    pub max_ticks: u64,
}

fn default_record_len() -> usize {
    64
}

fn default_max_ticks() -> u64 {
    200_000
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Target {
    Spir(u32),
    Subnet(u32),
}

impl Target {
    fn parse(s: &str) -> Option<Self> {
        let (kind, n) = s.split_once(':')?;
        let n: u32 = n.trim().parse().ok()?;
        match kind.trim() {
            "spir" => Some(Target::Spir(n)),
            "subnet" => Some(Target::Subnet(n)),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Op {
    Upload { file: String, target: Target },
    Delete { file: String },
    Retrieve { file: String },
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = toml::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    fn max_file_len(&self) -> usize {
        self.record_len - LEN_PREFIX
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.record_len <= LEN_PREFIX {
            return invalid(format!("record_len must exceed {LEN_PREFIX}"));
        }
        if self.network.delay_min > self.network.delay_max {
            return invalid("network.delay_min exceeds delay_max");
        }
        if !(0.0..=1.0).contains(&self.network.byzantine_drop_rate) {
            return invalid("byzantine_drop_rate must lie in [0, 1]");
        }
        if self.spir.backend == Backend::Plain && !self.spir.allow_insecure {
            return invalid("the plain backend needs allow_insecure = true");
        }
        if self.spir_miners.iter().any(|m| m.strategy == Strategy::SilentLeader) {
            return invalid("silent-leader only applies to subnet replicas");
        }
        for (i, s) in self.subnets.iter().enumerate() {
            let n = s.strategies.len();
            if n == 0 {
                return invalid(format!("subnet {i} is empty"));
            }
            let bad = s.strategies.iter().filter(|x| x.is_byzantine()).count();
            if bad > max_faulty(n) {
                return invalid(format!(
                    "subnet {i}: {bad} Byzantine replicas exceed f = {} for N = {n}",
                    max_faulty(n)
                ));
            }
        }
        if self.spir_miners.is_empty() && self.subnets.is_empty() {
            return invalid("no miners");
        }
        if let Some(w) = &self.workload {
            if w.clients == 0 {
                return invalid("workload.clients must be positive");
            }
            if w.file_size[0] > w.file_size[1] || w.file_size[1] > self.max_file_len() {
                return invalid(format!("workload.file_size must be ordered and at most {}", self.max_file_len()));
            }
            if w.deletes > w.files {
                return invalid("workload.deletes exceeds workload.files");
            }
            if !(0.0..=1.0).contains(&w.mpir_share) {
                return invalid("workload.mpir_share must lie in [0, 1]");
            }
        }
        let mut owner: HashMap<&str, u32> = HashMap::new();
        let mut uploaded: HashSet<&str> = HashSet::new();
        for (i, op) in self.ops.iter().enumerate() {
            if *owner.entry(&op.file).or_insert(op.client) != op.client {
                return invalid(format!("op {i}: file {} is used by two clients", op.file));
            }
            match op.op {
                OpKind::Upload => {
                    let Some(t) = op.target.as_deref().and_then(Target::parse) else {
                        return invalid(format!("op {i}: upload needs target \"spir:<id>\" or \"subnet:<index>\""));
                    };
                    match t {
                        Target::Spir(m) if m as usize >= self.spir_miners.len() => {
                            return invalid(format!("op {i}: no SPIR miner {m}"));
                        }
                        Target::Subnet(s) if s as usize >= self.subnets.len() => {
                            return invalid(format!("op {i}: no subnet {s}"));
                        }
                        _ => {}
                    }
                    if self.content_of(&op.file, op.content.as_deref()).len() > self.max_file_len() {
                        return invalid(format!("op {i}: file {} does not fit a record", op.file));
                    }
                    uploaded.insert(&op.file);
                }
                OpKind::Delete | OpKind::Retrieve => {
                    if !uploaded.contains(op.file.as_str()) {
                        return invalid(format!("op {i}: file {} is never uploaded before use", op.file));
                    }
                }
            }
        }
        Ok(())
    }

    fn content_of(&self, file: &str, explicit: Option<&str>) -> Vec<u8> {
        match explicit {
            Some(c) => c.as_bytes().to_vec(),
            None => format!("{file}@{}", self.seed).into_bytes(),
        }
    }

    /// Per-client operation lists and file contents, explicit ops first.
    pub fn plan(&self) -> (BTreeMap<u32, Vec<Op>>, BTreeMap<String, Vec<u8>>) {
        let mut plan: BTreeMap<u32, Vec<Op>> = BTreeMap::new();
        let mut contents = BTreeMap::new();
        for op in &self.ops {
            let file = op.file.clone();
            let entry = match op.op {
                OpKind::Upload => {
                    contents.insert(file.clone(), self.content_of(&file, op.content.as_deref()));
                    Op::Upload { file, target: op.target.as_deref().and_then(Target::parse).expect("validated") }
                }
                OpKind::Delete => Op::Delete { file },
                OpKind::Retrieve => Op::Retrieve { file },
            };
            plan.entry(op.client).or_default().push(entry);
        }
        let Some(w) = &self.workload else { return (plan, contents) };
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x0005_eed0_f0b5);
        let mut own: BTreeMap<u32, Vec<String>> = BTreeMap::new();
        let (mut next_spir, mut next_subnet) = (0u32, 0u32);
        let mut targets = Vec::new();
        for i in 0..w.files {
            let file = format!("w{i}");
            let client = i % w.clients;
            let len = rng.random_range(w.file_size[0]..=w.file_size[1]);
            let mut bytes = format!("{file}:").into_bytes();
            bytes.resize(len.max(bytes.len()).min(self.max_file_len()), 0);
            for b in bytes.iter_mut().skip(file.len() + 1) {
                *b = rng.random_range(1..=255);
            }
            let to_subnet = match (self.spir_miners.is_empty(), self.subnets.is_empty()) {
                (true, _) => true,
                (_, true) => false,
                _ => rng.random_bool(w.mpir_share),
            };
            let target = if to_subnet {
                next_subnet += 1;
                Target::Subnet((next_subnet - 1) % self.subnets.len() as u32)
            } else {
                next_spir += 1;
                Target::Spir((next_spir - 1) % self.spir_miners.len() as u32)
            };
            contents.insert(file.clone(), bytes);
            targets.push((file.clone(), target));
            plan.entry(client).or_default().push(Op::Upload { file: file.clone(), target });
            own.entry(client).or_default().push(file);
        }
        let all: Vec<String> = (0..w.files).map(|i| format!("w{i}")).collect();
        let owner = |f: &str| -> u32 { f[1..].parse::<u32>().expect("generated name") % w.clients };
        if !all.is_empty() {
            for _ in 0..w.retrievals.div_ceil(2) {
                let f = all.choose(&mut rng).expect("nonempty").clone();
                plan.entry(owner(&f)).or_default().push(Op::Retrieve { file: f });
            }
        }
        // Deletes are spread over upload targets first so every miner and
        // subnet sees at least one when the budget allows.
        let mut by_target: BTreeMap<Target, Vec<String>> = BTreeMap::new();
        for (f, t) in &targets {
            by_target.entry(*t).or_default().push(f.clone());
        }
        for files in by_target.values_mut() {
            for i in (1..files.len()).rev() {
                files.swap(i, rng.random_range(0..=i));
            }
        }
        let mut doomed = Vec::new();
        let mut round = 0;
        while doomed.len() < w.deletes as usize {
            for files in by_target.values() {
                if let Some(f) = files.get(round) {
                    if doomed.len() < w.deletes as usize {
                        doomed.push(f.clone());
                    }
                }
            }
            round += 1;
        }
        for f in &doomed {
            plan.entry(owner(f)).or_default().push(Op::Delete { file: f.clone() });
        }
        if !all.is_empty() {
            for i in 0..w.retrievals / 2 {
                // Alternate between deleted and arbitrary files.
                let f = match doomed.get(i as usize) {
                    Some(d) if i % 2 == 0 => d.clone(),
                    _ => all.choose(&mut rng).expect("nonempty").clone(),
                };
                plan.entry(owner(&f)).or_default().push(Op::Retrieve { file: f });
            }
        }
        (plan, contents)
    }
}

// ----- messages -----

#[derive(Clone, Debug)]
pub enum Msg {
    SpirUpload { req: u64, fid: Fid, bytes: Vec<u8> },
    SpirDelete { req: u64, fid: Fid },
    SpirVerdict { req: u64, result: Result<(), String>, attacked: bool },
    SpirQuery { req: u64, query: SingleQuery },
    SpirAnswer { req: u64, answer: Result<SingleAnswer, QueryError> },
    Request(ClientRequest),
    Smr(SmrMsg),
    Reply(Reply),
    MultiQuery { req: u64, query: MultiQuery },
    MultiAnswer { req: u64, response: MultiResponse },
}

impl Traced for Msg {
    fn label(&self) -> String {
        match self {
            Msg::SpirUpload { req, fid, .. } => format!("spir-upload #{req} {fid}"),
            Msg::SpirDelete { req, fid } => format!("spir-delete #{req} {fid}"),
            Msg::SpirVerdict { req, result, .. } => {
                format!("spir-verdict #{req} {}", if result.is_ok() { "ok" } else { "rejected" })
            }
            Msg::SpirQuery { req, query } => format!("spir-query #{req} n{} v{}", query.db_size, query.db_version),
            Msg::SpirAnswer { req, answer } => {
                format!("spir-answer #{req} {}", if answer.is_ok() { "ok" } else { "refused" })
            }
            Msg::Request(r) => format!("request c{}#{} {}", r.client, r.id, r.fid()),
            Msg::Smr(m) => m.label(),
            Msg::Reply(r) => format!("reply r{} c{}#{} h{}", r.replica, r.client, r.request, r.height),
            Msg::MultiQuery { req, query } => {
                format!("mpir-query #{req} s{} v{}", query.server, query.header.db_version)
            }
            Msg::MultiAnswer { req, response } => {
                let what = match response {
                    MultiResponse::Answer(_) => "ok",
                    MultiResponse::Refused(_) => "refused",
                    MultiResponse::Deferred => "deferred",
                    MultiResponse::Malformed(_) => "malformed",
                };
                format!("mpir-answer #{req} {what}")
            }
        }
    }
}

// ----- report -----

/// One completed client operation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Row {
    pub operation: &'static str,
    pub mode: &'static str,
    /// Database size of the chain involved.
    pub n: u64,
    pub record_len: usize,
    pub latency_ticks: u64,
    pub wall_ms: f64,
    pub hash_count: u64,
    pub outcome: String,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct AttackStats {
    pub attempted: u64,
    pub detected: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SimReport {
    pub name: String,
    pub seed: u64,
    pub trace_digest: String,
    pub final_tick: u64,
    pub completed: bool,
    pub net: NetCounters,
    pub requests: u64,
    pub satisfied: u64,
    pub unsatisfied: Vec<String>,
    pub attacks: BTreeMap<String, AttackStats>,
    /// Strategies configured but never given a chance to act.
    pub idle_strategies: Vec<String>,
    pub divergences: u64,
    /// Committed blocks whose proofs the ledger refused.
    pub rejected_commits: u64,
    pub forged_commits: u64,
    pub halted_replicas: u64,
    pub view_changes: u64,
    /// Largest number of views a subnet request spanned before committing.
    pub max_views_per_request: u64,
    pub view_bound: u64,
    pub max_pir_rounds: u32,
    pub final_digests: BTreeMap<String, String>,
    pub rows: Vec<Row>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct NetCounters {
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub pending: u64,
    pub conserved: bool,
}

impl SimReport {
    pub fn all_attacks_detected(&self) -> bool {
        self.attacks.values().all(|a| a.attempted > 0 && a.detected == a.attempted)
    }

    /// Every request satisfied, every attack detected, no safety violation.
    pub fn passed(&self) -> bool {
        self.completed
            && self.unsatisfied.is_empty()
            && self.satisfied == self.requests
            && self.all_attacks_detected()
            && self.idle_strategies.is_empty()
            && self.divergences == 0
            && self.rejected_commits == 0
            && self.forged_commits == 0
            && self.halted_replicas == 0
            && self.max_views_per_request <= self.view_bound
            && self.net.conserved
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        use std::fmt::Write;
        let _ = writeln!(s, "scenario {} seed {}", if self.name.is_empty() { "-" } else { &self.name }, self.seed);
        let _ = writeln!(s, "ticks {} completed {}", self.final_tick, self.completed);
        let _ = writeln!(s, "requests {}/{} satisfied", self.satisfied, self.requests);
        for u in &self.unsatisfied {
            let _ = writeln!(s, "  unsatisfied: {u}");
        }
        for (k, a) in &self.attacks {
            let _ = writeln!(s, "attack {k}: {}/{} detected", a.detected, a.attempted);
        }
        for k in &self.idle_strategies {
            let _ = writeln!(s, "strategy {k}: never exercised");
        }
        let _ = writeln!(
            s,
            "safety: divergences {} rejected-commits {} forged-commits {} halted {}",
            self.divergences, self.rejected_commits, self.forged_commits, self.halted_replicas
        );
        let _ = writeln!(
            s,
            "liveness: view changes {} max views/request {} (bound {})",
            self.view_changes, self.max_views_per_request, self.view_bound
        );
        let _ = writeln!(
            s,
            "network: sent {} delivered {} dropped {} pending {} conserved {}",
            self.net.sent, self.net.delivered, self.net.dropped, self.net.pending, self.net.conserved
        );
        let _ = writeln!(s, "max pir rounds per retrieval {}", self.max_pir_rounds);
        let _ = writeln!(s, "trace {}", self.trace_digest);
        let _ = writeln!(s, "result {}", if self.passed() { "PASS" } else { "FAIL" });
        s
    }
}

// ----- runtime state -----

struct Subnet {
    chain: ChainId,
    ids: Vec<u32>,
    miners: Vec<MpirMiner>,
}

impl Subnet {
    fn honest(&self, pos: usize) -> bool {
        !self.miners[pos].replica().strategy().is_byzantine()
    }

    fn max_honest_view(&self) -> u64 {
        (0..self.miners.len()).filter(|&p| self.honest(p)).map(|p| self.miners[p].replica().view()).max().unwrap_or(0)
    }
}

#[derive(Clone, Copy, Debug)]
enum Loc {
    Spir(usize),
    Replica(usize, usize),
}

enum Pending {
    SpirMutation {
        fid: Fid,
        miner: u32,
        tried: Vec<u32>,
        upload: bool,
        resends: u32,
    },
    Smr {
        subnet: usize,
        tally: ReplyTally,
        submit_view: u64,
        upload: bool,
    },
    SpirRead {
        r: SpirRetrieval,
        query: SingleQuery,
        hint: Option<Arc<Hint>>,
        retried: bool,
        resends: u32,
        server_wall: f64,
    },
    MpirRead {
        r: MpirRetrieval,
        answers: Vec<(u32, MultiAnswer)>,
        responded: BTreeSet<u32>,
        refused: bool,
        retried: bool,
        server_wall: f64,
    },
}

struct InFlight {
    req: u64,
    op: Op,
    started: u64,
    pending: Pending,
}

struct ClientActor {
    ops: VecDeque<Op>,
    inflight: Option<InFlight>,
    next_req: u64,
}

struct World {
    record_len: usize,
    smr: SmrConfig,
    net: Network<Msg>,
    ledger: Ledger,
    spir: Vec<SpirMiner>,
    subnets: Vec<Subnet>,
    locate: HashMap<u32, Loc>,
    clients: Vec<ClientActor>,
    contents: BTreeMap<String, Vec<u8>>,
    live: BTreeMap<String, bool>,
    rng: ChaCha8Rng,
    report: SimReport,
    /// Deferred multi-server queries: tag -> (client, req).
    tags: Vec<(u32, u64)>,
    commits: HashMap<(usize, u64), (Digest, Digest)>,
    forged: HashMap<Digest, String>,
    rejected_blocks: HashSet<Digest>,
    committed_blocks: HashSet<Digest>,
    commit_view: HashMap<(usize, u32, u64), u64>,
    request_hashes: HashMap<(u32, u64), u64>,
    honest_views: Vec<BTreeSet<u64>>,
    touched_subnets: BTreeSet<usize>,
}

/// Times a SPIR client re-sends to an unresponsive miner before giving up.
const SPIR_RESENDS: u32 = 3;

impl World {
    fn new(s: &Scenario, keep_trace: bool) -> Self {
        let mut net = Network::new(s.network.clone(), s.seed);
        if keep_trace {
            net.keep_log();
        }
        let smr =
            SmrConfig { view_timeout: s.smr.view_timeout, delay_max: s.network.delay_max, max_batch: s.smr.max_batch };
        let mut ledger = Ledger::new();
        let mut locate = HashMap::new();
        let mut spir = Vec::new();
        for (i, m) in s.spir_miners.iter().enumerate() {
            let id = i as u32;
            let cfg = MinerConfig {
                id,
                mode: Mode::Spir,
                strategy: m.strategy,
                record_len: s.record_len,
                spir: s.spir.clone(),
                seed: s.seed,
            };
            if m.strategy.is_byzantine() {
                net.mark_byzantine(Addr::Miner(id));
            }
            locate.insert(id, Loc::Spir(i));
            spir.push(SpirMiner::new(cfg));
        }
        let mut next_id = spir.len() as u32;
        let mut subnets = Vec::new();
        for (si, sub) in s.subnets.iter().enumerate() {
            let chain = SUBNET_CHAIN_BASE + si as u32;
            let n = sub.strategies.len();
            let ids: Vec<u32> = (0..n as u32).map(|p| next_id + p).collect();
            next_id += n as u32;
            ledger.register_chain(chain, ids.clone());
            let miners = sub
                .strategies
                .iter()
                .enumerate()
                .map(|(p, &strategy)| {
                    let cfg = MinerConfig {
                        id: ids[p],
                        mode: Mode::Mpir,
                        strategy,
                        record_len: s.record_len,
                        spir: s.spir.clone(),
                        seed: s.seed,
                    };
                    if strategy.is_byzantine() {
                        net.mark_byzantine(Addr::Miner(ids[p]));
                    }
                    locate.insert(ids[p], Loc::Replica(si, p));
                    MpirMiner::new(&cfg, chain, p as u32, n, smr.clone())
                })
                .collect();
            subnets.push(Subnet { chain, ids, miners });
        }
        let (plan, contents) = s.plan();
        let n_clients = plan.keys().next_back().map_or(0, |&c| c as usize + 1);
        let mut clients: Vec<ClientActor> =
            (0..n_clients).map(|_| ClientActor { ops: VecDeque::new(), inflight: None, next_req: 0 }).collect();
        for (c, ops) in plan {
            clients[c as usize].ops = ops.into();
        }
        let worst_f = s.subnets.iter().map(|x| max_faulty(x.strategies.len()) as u64).max().unwrap_or(0);
        let report =
            SimReport { name: s.name.clone(), seed: s.seed, view_bound: 3 * (worst_f + 1), ..SimReport::default() };
        let n_sub = subnets.len();
        Self {
            record_len: s.record_len,
            smr,
            net,
            ledger,
            spir,
            subnets,
            locate,
            clients,
            contents,
            live: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(s.seed.rotate_left(7) ^ 0x00c1_1e47),
            report,
            tags: Vec::new(),
            commits: HashMap::new(),
            forged: HashMap::new(),
            rejected_blocks: HashSet::new(),
            committed_blocks: HashSet::new(),
            commit_view: HashMap::new(),
            request_hashes: HashMap::new(),
            honest_views: vec![BTreeSet::new(); n_sub],
            touched_subnets: BTreeSet::new(),
        }
    }

    fn attack(&mut self, label: &str, detected: bool) {
        let a = self.report.attacks.entry(label.to_string()).or_default();
        a.attempted += 1;
        a.detected += u64::from(detected);
    }

    fn fid_of(&self, file: &str) -> Fid {
        Fid::of(&self.contents[file])
    }

    // ----- clients -----

    fn start_next(&mut self, c: usize) {
        while self.clients[c].inflight.is_none() {
            let Some(op) = self.clients[c].ops.pop_front() else { return };
            self.start_op(c, op);
        }
    }

    fn new_req(&mut self, c: usize) -> u64 {
        let r = self.clients[c].next_req;
        self.clients[c].next_req += 1;
        r
    }

    fn start_op(&mut self, c: usize, op: Op) {
        let now = self.net.now();
        let req = self.new_req(c);
        match &op {
            Op::Upload { file, target } => {
                let bytes = self.contents[file].clone();
                let fid = Fid::of(&bytes);
                match *target {
                    Target::Spir(m) => {
                        let pending = Pending::SpirMutation { fid, miner: m, tried: vec![m], upload: true, resends: 0 };
                        self.clients[c].inflight = Some(InFlight { req, op, started: now, pending });
                        self.send_spir_mutation(c);
                    }
                    Target::Subnet(s) => {
                        let request = ClientRequest::upload(c as u32, req, bytes);
                        self.submit_smr(c, s as usize, request, op, now, true);
                    }
                }
            }
            Op::Delete { file } => {
                let fid = self.fid_of(file);
                match self.ledger.lookup(&fid) {
                    None => {
                        // Deleting a file the directory does not list.
                        self.push_row("delete", "directory", 0, now, 0.0, 0, "absent".into());
                        self.judge(false, &op, "absent");
                    }
                    Some(l) if l.chain < SUBNET_CHAIN_BASE => {
                        let pending = Pending::SpirMutation {
                            fid,
                            miner: l.chain,
                            tried: vec![l.chain],
                            upload: false,
                            resends: 0,
                        };
                        self.clients[c].inflight = Some(InFlight { req, op, started: now, pending });
                        self.send_spir_mutation(c);
                    }
                    Some(l) => {
                        let s = (l.chain - SUBNET_CHAIN_BASE) as usize;
                        let request = ClientRequest::delete(c as u32, req, fid);
                        self.submit_smr(c, s, request, op, now, false);
                    }
                }
            }
            Op::Retrieve { file } => {
                let fid = self.fid_of(file);
                self.start_retrieval(c, op.clone(), fid, req, now, false);
            }
        }
    }

    fn spir_timeout(&self) -> u64 {
        4 * self.net.config().delay_max + 2
    }

    /// (Re)sends the in-flight SPIR mutation under a fresh request id.
    fn send_spir_mutation(&mut self, c: usize) {
        let req = self.new_req(c);
        let timeout = self.spir_timeout();
        let me = Addr::Client(c as u32);
        let inf = self.clients[c].inflight.as_mut().expect("in flight");
        let Pending::SpirMutation { fid, miner, upload, .. } = inf.pending else { unreachable!() };
        inf.req = req;
        let msg = if upload {
            Msg::SpirUpload { req, fid, bytes: self.contents[op_file(&inf.op)].clone() }
        } else {
            Msg::SpirDelete { req, fid }
        };
        self.net.send(me, Addr::Miner(miner), msg);
        self.net.set_timer(me, timeout, req);
    }

    fn finish_spir_mutation(&mut self, c: usize, outcome: &str, ok: bool) {
        let inf = self.clients[c].inflight.take().expect("in flight");
        let Pending::SpirMutation { miner, upload, .. } = inf.pending else { unreachable!() };
        if ok && outcome.starts_with("accepted") {
            self.live.insert(op_file(&inf.op).to_string(), upload);
        }
        let h = self.request_hashes.remove(&(c as u32, inf.req)).unwrap_or(0);
        let n = self.ledger.db_size(miner);
        self.push_row(if upload { "upload" } else { "delete" }, "spir", n, inf.started, 0.0, h, outcome.into());
        self.judge(ok, &inf.op, outcome);
    }

    fn submit_smr(&mut self, c: usize, s: usize, request: ClientRequest, op: Op, now: u64, upload: bool) {
        let me = Addr::Client(c as u32);
        let sub = &self.subnets[s];
        let submit_view = sub.max_honest_view();
        let ids = sub.ids.clone();
        let tally = ReplyTally::new(ids.len());
        for id in ids {
            self.net.send(me, Addr::Miner(id), Msg::Request(request.clone()));
        }
        self.touched_subnets.insert(s);
        let pending = Pending::Smr { subnet: s, tally, submit_view, upload };
        self.clients[c].inflight = Some(InFlight { req: request.id, op, started: now, pending });
    }

    fn start_retrieval(&mut self, c: usize, op: Op, fid: Fid, req: u64, started: u64, retried: bool) {
        let me = Addr::Client(c as u32);
        let Some(l) = self.ledger.lookup(&fid) else {
            let report = RetrievalReport {
                fid,
                outcome: Outcome::Absent,
                bytes: None,
                pir_rounds: 0,
                query_bytes: 0,
                answer_bytes: 0,
                wall: Default::default(),
            };
            self.finish_retrieval(c, op, started, report, "directory", 0, 0.0, None);
            return;
        };
        if l.chain < SUBNET_CHAIN_BASE {
            let m = l.chain;
            let Loc::Spir(i) = self.locate[&m] else { unreachable!("spir chain") };
            let params = self.spir[i].params().clone();
            let (r, query) = spir_start(fid, &self.ledger, self.record_len, &params, &mut self.rng).expect("looked up");
            // Offline phase: the hint for this version, fetched directly.
            let hint = (params.backend == Backend::Lwe).then(|| self.spir[i].hint());
            self.net.send(me, Addr::Miner(m), Msg::SpirQuery { req, query: query.clone() });
            self.net.set_timer(me, self.spir_timeout(), req);
            let pending = Pending::SpirRead { r, query, hint, retried, resends: 0, server_wall: 0.0 };
            self.clients[c].inflight = Some(InFlight { req, op, started, pending });
        } else {
            let (r, queries) = mpir_start(fid, &self.ledger, self.record_len, &mut self.rng).expect("looked up");
            for (id, query) in queries {
                self.net.send(me, Addr::Miner(id), Msg::MultiQuery { req, query });
            }
            let timeout = 6 * self.smr.view_timeout + 8 * self.smr.delay_max;
            self.net.set_timer(me, timeout, req);
            let pending = Pending::MpirRead {
                r,
                answers: Vec::new(),
                responded: BTreeSet::new(),
                refused: false,
                retried,
                server_wall: 0.0,
            };
            self.clients[c].inflight = Some(InFlight { req, op, started, pending });
        }
    }

    fn push_row(
        &mut self,
        operation: &'static str,
        mode: &'static str,
        n: u64,
        started: u64,
        wall_ms: f64,
        hash_count: u64,
        outcome: String,
    ) {
        self.report.rows.push(Row {
            operation,
            mode,
            n,
            record_len: self.record_len,
            latency_ticks: self.net.now() - started,
            wall_ms,
            hash_count,
            outcome,
        });
    }

    fn judge(&mut self, ok: bool, op: &Op, detail: &str) {
        self.report.requests += 1;
        if ok {
            self.report.satisfied += 1;
        } else {
            self.report.unsatisfied.push(format!("{op:?}: {detail}"));
        }
    }

    fn on_client(&mut self, c: usize, from: Addr, msg: Msg) {
        let Some(inf) = self.clients[c].inflight.as_mut() else { return };
        match (msg, &mut inf.pending) {
            (Msg::SpirVerdict { req, result, attacked }, Pending::SpirMutation { miner, tried, upload, .. })
                if req == inf.req =>
            {
                match result {
                    Ok(()) => {
                        let outcome = if tried.len() > 1 { "accepted-after-retry" } else { "accepted" };
                        self.finish_spir_mutation(c, outcome, true);
                    }
                    Err(e) => {
                        let n = self.spir.len() as u32;
                        let next =
                            (0..n).map(|k| (*miner + 1 + k) % n).find(|m| !tried.contains(m)).filter(|_| *upload);
                        match next {
                            Some(m) => {
                                tried.push(m);
                                *miner = m;
                                if let Pending::SpirMutation { resends, .. } = &mut inf.pending {
                                    *resends = 0;
                                }
                                self.send_spir_mutation(c);
                            }
                            // A forged proof the ledger refused: the client sees
                            // the rejection and nothing changed.
                            None if attacked => self.finish_spir_mutation(c, "rejected-forgery", true),
                            None => self.finish_spir_mutation(c, &format!("rejected: {e}"), false),
                        }
                    }
                }
            }
            (Msg::Reply(reply), Pending::Smr { subnet, tally, submit_view, upload }) if reply.request == inf.req => {
                let s = *subnet;
                let Addr::Miner(id) = from else { return };
                if !self.subnets[s].ids.contains(&id) || reply.replica as usize >= self.subnets[s].ids.len() {
                    return;
                }
                if self.subnets[s].ids[reply.replica as usize] != id {
                    return;
                }
                let Some(outcome) = tally.add(id, reply.outcome) else { return };
                let (submit_view, upload) = (*submit_view, *upload);
                let op = inf.op.clone();
                let started = inf.started;
                let req = inf.req;
                if let Some(&v) = self.commit_view.get(&(s, c as u32, req)) {
                    let views = v.saturating_sub(submit_view) + 1;
                    self.report.max_views_per_request = self.report.max_views_per_request.max(views);
                }
                let ok = matches!(outcome, RequestOutcome::Applied(_));
                if ok {
                    self.live.insert(op_file(&op).to_string(), upload);
                }
                let h = self.request_hashes.remove(&(c as u32, req)).unwrap_or(0);
                let n = self.ledger.db_size(self.subnets[s].chain);
                let label = if ok { "applied" } else { "rejected" };
                self.push_row(if upload { "upload" } else { "delete" }, "mpir", n, started, 0.0, h, label.into());
                self.judge(ok, &op, label);
                self.clients[c].inflight = None;
            }
            (Msg::SpirAnswer { req, answer }, Pending::SpirRead { .. }) if req == inf.req => {
                let inf = self.clients[c].inflight.take().expect("in flight");
                let Pending::SpirRead { r, hint, retried, server_wall, .. } = inf.pending else { unreachable!() };
                match answer {
                    Ok(a) => {
                        let miner = r.miner;
                        let n = r.lookup.db_size;
                        let report = spir_finish(r, &a, hint.as_deref());
                        self.finish_retrieval(c, inf.op, inf.started, report, "spir", n, server_wall, Some(miner));
                    }
                    Err(_) if !retried => {
                        let fid = r.fid;
                        let req = self.new_req(c);
                        self.start_retrieval(c, inf.op, fid, req, inf.started, true);
                    }
                    Err(e) => {
                        let fid = r.fid;
                        self.push_row("retrieve", "spir", r.lookup.db_size, inf.started, 0.0, 0, "refused".into());
                        self.judge(false, &inf.op, &format!("{fid} refused twice: {e}"));
                    }
                }
            }
            (Msg::MultiAnswer { req, response }, Pending::MpirRead { answers, responded, refused, r, .. })
                if req == inf.req =>
            {
                let Addr::Miner(id) = from else { return };
                if !r.miners().contains(&id) || !responded.insert(id) {
                    return;
                }
                match response {
                    MultiResponse::Answer(a) => answers.push((id, a)),
                    MultiResponse::Refused(_) | MultiResponse::Malformed(_) => *refused = true,
                    MultiResponse::Deferred => {
                        responded.remove(&id);
                    }
                }
                if responded.len() == r.miners().len() {
                    self.complete_mpir(c);
                }
            }
            _ => {}
        }
        self.start_next(c);
    }

    fn complete_mpir(&mut self, c: usize) {
        let inf = self.clients[c].inflight.take().expect("in flight");
        let Pending::MpirRead { r, answers, refused, retried, server_wall, .. } = inf.pending else { unreachable!() };
        if refused && !retried {
            let fid = r.fid;
            let req = self.new_req(c);
            self.start_retrieval(c, inf.op, fid, req, inf.started, true);
            return;
        }
        let n = r.lookup.db_size;
        let corrupt: Vec<u32> = answers
            .iter()
            .map(|(id, _)| *id)
            .filter(|id| matches!(self.strategy_of(*id), Strategy::CorruptPirAnswer))
            .collect();
        let mut report = mpir_finish(r, answers);
        if retried {
            report.pir_rounds += 1;
        }
        for id in corrupt {
            let detected = match &report.outcome {
                Outcome::RobustRecovered { faulty } => faulty.contains(&id),
                Outcome::Unrecoverable { .. } => true,
                _ => false,
            };
            self.attack("corrupt-pir-answer/mpir", detected);
        }
        self.finish_retrieval(c, inf.op, inf.started, report, "mpir", n, server_wall, None);
    }

    fn strategy_of(&self, id: u32) -> Strategy {
        match self.locate.get(&id) {
            Some(Loc::Spir(i)) => self.spir[*i].strategy(),
            Some(Loc::Replica(s, p)) => self.subnets[*s].miners[*p].replica().strategy(),
            None => Strategy::Honest,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn finish_retrieval(
        &mut self,
        c: usize,
        op: Op,
        started: u64,
        report: RetrievalReport,
        mode: &'static str,
        n: u64,
        server_wall: f64,
        spir_miner: Option<u32>,
    ) {
        let file = op_file(&op).to_string();
        let expect_live = self.live.get(&file).copied().unwrap_or(false);
        let content = self.contents[&file].clone();
        let corrupt_spir = spir_miner.is_some_and(|m| self.strategy_of(m) == Strategy::CorruptPirAnswer);
        if corrupt_spir {
            self.attack("corrupt-pir-answer/spir", report.outcome == Outcome::IntegrityFailure);
        }
        let ok = match &report.outcome {
            Outcome::Recovered => expect_live && report.bytes.as_deref() == Some(content.as_slice()),
            Outcome::RobustRecovered { faulty } => {
                expect_live
                    && report.bytes.as_deref() == Some(content.as_slice())
                    && faulty.iter().all(|&id| self.strategy_of(id).is_byzantine())
            }
            Outcome::Absent => !expect_live,
            // Detected, cannot be recovered from a single miner.
            Outcome::IntegrityFailure => corrupt_spir,
            Outcome::Unrecoverable { .. } => false,
        };
        self.report.max_pir_rounds = self.report.max_pir_rounds.max(report.pir_rounds);
        let wall = report.wall.as_secs_f64() * 1e3 + server_wall;
        self.push_row("retrieve", mode, n, started, wall, 0, report.outcome.label().into());
        self.judge(ok, &op, report.outcome.label());
        self.clients[c].inflight = None;
    }

    fn on_client_timer(&mut self, c: usize, token: u64) {
        let timeout = self.spir_timeout();
        let me = Addr::Client(c as u32);
        let Some(inf) = self.clients[c].inflight.as_mut() else { return };
        if inf.req != token {
            return;
        }
        match &mut inf.pending {
            Pending::MpirRead { .. } => self.complete_mpir(c),
            Pending::SpirMutation { fid, miner, tried, upload, resends } => {
                let (fid, m, upload, r) = (*fid, *miner, *upload, *resends);
                let n = self.spir.len() as u32;
                let next = (0..n).map(|k| (m + 1 + k) % n).find(|x| !tried.contains(x)).filter(|_| upload);
                // The verdict was lost. The ledger is public, so check whether
                // the proof landed before asking again.
                let landed = self.ledger.lookup_in(m, &fid).is_some() == upload;
                if landed {
                    self.finish_spir_mutation(c, "accepted-unconfirmed", true);
                } else if r < SPIR_RESENDS || next.is_some() {
                    if let Some(InFlight { pending: Pending::SpirMutation { miner, tried, resends, .. }, .. }) =
                        self.clients[c].inflight.as_mut()
                    {
                        match (r < SPIR_RESENDS, next) {
                            (true, _) => *resends += 1,
                            (false, Some(x)) => {
                                tried.push(x);
                                *miner = x;
                                *resends = 0;
                            }
                            (false, None) => unreachable!(),
                        }
                    }
                    self.send_spir_mutation(c);
                } else {
                    let byzantine = self.strategy_of(m).is_byzantine();
                    self.finish_spir_mutation(c, "unresponsive", byzantine);
                }
            }
            Pending::SpirRead { r, query, resends, .. } => {
                if *resends < SPIR_RESENDS {
                    *resends += 1;
                    let miner = r.miner;
                    let query = query.clone();
                    let req = self.clients[c].next_req;
                    self.clients[c].next_req += 1;
                    let inf = self.clients[c].inflight.as_mut().expect("in flight");
                    inf.req = req;
                    self.net.send(me, Addr::Miner(miner), Msg::SpirQuery { req, query });
                    self.net.set_timer(me, timeout, req);
                } else {
                    let inf = self.clients[c].inflight.take().expect("in flight");
                    let Pending::SpirRead { r, .. } = inf.pending else { unreachable!() };
                    let ok = self.strategy_of(r.miner).is_byzantine();
                    self.push_row("retrieve", "spir", r.lookup.db_size, inf.started, 0.0, 0, "unresponsive".into());
                    self.judge(ok, &inf.op, "unresponsive");
                }
            }
            Pending::Smr { .. } => {}
        }
        self.start_next(c);
    }

    // ----- miners -----

    fn on_spir(&mut self, i: usize, from: Addr, msg: Msg) {
        let me = Addr::Miner(self.spir[i].id());
        match msg {
            Msg::SpirUpload { req, fid, bytes } => {
                let t0 = Instant::now();
                let (res, h) = hash::count(|| self.spir[i].handle_upload(&mut self.ledger, fid, &bytes));
                let _ = t0;
                let reply = self.mutation_verdict(from, req, res, h);
                self.net.send(me, from, reply);
            }
            Msg::SpirDelete { req, fid } => {
                let (res, h) = hash::count(|| self.spir[i].handle_delete(&mut self.ledger, fid));
                let reply = self.mutation_verdict(from, req, res, h);
                self.net.send(me, from, reply);
            }
            Msg::SpirQuery { req, query } => {
                let t0 = Instant::now();
                let answer = self.spir[i].handle_query(&query);
                let wall = t0.elapsed().as_secs_f64() * 1e3;
                if let Addr::Client(c) = from {
                    if let Some(InFlight { pending: Pending::SpirRead { server_wall, .. }, .. }) =
                        self.clients[c as usize].inflight.as_mut()
                    {
                        *server_wall += wall;
                    }
                }
                self.net.send(me, from, Msg::SpirAnswer { req, answer });
            }
            _ => {}
        }
    }

    fn mutation_verdict(
        &mut self,
        from: Addr,
        req: u64,
        res: Result<crate::node::Mutation, crate::store::StoreError>,
        hashes: u64,
    ) -> Msg {
        match res {
            Ok(m) => {
                let mut attacked = false;
                for r in m.receipts() {
                    if let Some(a) = r.attack {
                        self.attack(a.label(), r.verdict.is_err());
                        attacked |= std::ptr::eq(r, &m.primary);
                    }
                }
                if let Addr::Client(c) = from {
                    if m.accepted() {
                        self.request_hashes.insert((c, req), hashes);
                    }
                }
                let result = m.primary.verdict.map(|_| ()).map_err(|e| e.to_string());
                Msg::SpirVerdict { req, result, attacked }
            }
            Err(e) => Msg::SpirVerdict { req, result: Err(e.to_string()), attacked: false },
        }
    }

    fn on_replica(&mut self, s: usize, p: usize, from: Addr, msg: Msg) {
        let mut out = Vec::new();
        match msg {
            Msg::Request(r) => self.subnets[s].miners[p].handle_request(r, &mut out),
            Msg::Smr(m) => self.subnets[s].miners[p].replica_mut().on_message(m, &mut out),
            Msg::MultiQuery { req, query } => {
                let Addr::Client(c) = from else { return };
                let tag = self.tags.len() as u32;
                self.tags.push((c, req));
                let t0 = Instant::now();
                let response = self.subnets[s].miners[p].handle_multi_query(tag, query);
                self.add_server_wall(c, t0);
                if response != MultiResponse::Deferred {
                    let me = Addr::Miner(self.subnets[s].ids[p]);
                    self.net.send(me, from, Msg::MultiAnswer { req, response });
                }
            }
            _ => {}
        }
        self.route(s, p, out);
    }

    fn add_server_wall(&mut self, c: u32, t0: Instant) {
        let wall = t0.elapsed().as_secs_f64() * 1e3;
        if let Some(InFlight { pending: Pending::MpirRead { server_wall, .. }, .. }) =
            self.clients[c as usize].inflight.as_mut()
        {
            *server_wall += wall;
        }
    }

    fn route(&mut self, s: usize, p: usize, out: Vec<Output>) {
        let me_id = self.subnets[s].ids[p];
        let me = Addr::Miner(me_id);
        let honest = self.subnets[s].honest(p);
        let mut committed = false;
        for o in out {
            match o {
                Output::Broadcast(m) => {
                    let ids = self.subnets[s].ids.clone();
                    for (q, id) in ids.into_iter().enumerate() {
                        if q != p {
                            self.net.send(me, Addr::Miner(id), Msg::Smr(m.clone()));
                        }
                    }
                }
                Output::Send(q, m) => {
                    let id = self.subnets[s].ids[q as usize];
                    self.net.send(me, Addr::Miner(id), Msg::Smr(m));
                }
                Output::Reply(r) => self.net.send(me, Addr::Client(r.client), Msg::Reply(r)),
                Output::Timer { delay, token } => self.net.set_timer(me, delay, token),
                Output::Committed { block, qc_view, state } => {
                    committed = true;
                    if honest {
                        self.on_honest_commit(s, block, qc_view, state);
                    }
                }
                Output::Rejected { block, .. } => {
                    if honest {
                        self.rejected_blocks.insert(block);
                    }
                }
                Output::Forged { attack, block, view } => {
                    self.forged.insert(block, attack.label().to_string());
                    self.net.note(&format!("m{me_id} forged {} v{view} {}", attack.label(), block.short()));
                }
                Output::ViewChange { view } => {
                    if honest {
                        self.report.view_changes += 1;
                        self.honest_views[s].insert(view);
                        self.net.note(&format!("m{me_id} view-change v{view}"));
                    }
                }
                Output::Halted => self.report.halted_replicas += 1,
            }
        }
        if committed {
            let ready = self.subnets[s].miners[p].drain_ready();
            for (tag, response) in ready {
                let (c, req) = self.tags[tag as usize];
                self.net.send(me, Addr::Client(c), Msg::MultiAnswer { req, response });
            }
        }
    }

    fn on_honest_commit(&mut self, s: usize, block: crate::smr::Block, qc_view: u64, state: Digest) {
        let digest = block.digest();
        self.net.note(&format!("subnet {s} commit h{} {} state {}", block.height, digest.short(), state.short()));
        match self.commits.get(&(s, block.height)) {
            Some(&(d, st)) => {
                if d != digest || st != state {
                    self.report.divergences += 1;
                }
            }
            None => {
                self.commits.insert((s, block.height), (digest, state));
            }
        }
        if self.forged.contains_key(&digest) {
            self.report.forged_commits += 1;
        }
        if !self.committed_blocks.insert(digest) {
            return;
        }
        let chain = self.subnets[s].chain;
        for e in &block.entries {
            let key = (e.request.client, e.request.id);
            self.commit_view.entry((s, key.0, key.1)).or_insert(qc_view);
            let Some(p) = &e.proof else { continue };
            if self.ledger.get(&p.digest()).is_ok() {
                continue;
            }
            let (res, h) = hash::count(|| self.ledger.append(chain, p.clone()));
            match res {
                Ok(_) => {
                    self.request_hashes.insert(key, h);
                }
                Err(_) => self.report.rejected_commits += 1,
            }
        }
    }

    fn finalize(mut self, completed: bool) -> SimReport {
        // Block-level forgeries: detected when an honest replica refused the
        // block and it never committed.
        let forged: Vec<(Digest, String)> = self.forged.iter().map(|(d, l)| (*d, l.clone())).collect();
        let mut forged = forged;
        forged.sort();
        for (d, label) in forged {
            let detected = self.rejected_blocks.contains(&d) && !self.committed_blocks.contains(&d);
            self.attack(&format!("{label}/smr"), detected);
        }
        // Silent leaders: each view they led that honest replicas entered
        // while work was pending, detected when honest replicas moved on.
        for (s, sub) in self.subnets.iter().enumerate() {
            let n = sub.ids.len() as u64;
            for (p, m) in sub.miners.iter().enumerate() {
                if m.replica().strategy() != Strategy::SilentLeader {
                    continue;
                }
                let mut views: BTreeSet<u64> = self.honest_views[s].clone();
                if self.touched_subnets.contains(&s) {
                    views.insert(0);
                }
                let top = sub.max_honest_view();
                for v in views.into_iter().filter(|v| v % n == p as u64) {
                    let a = self.report.attacks.entry("silent-leader/smr".into()).or_default();
                    a.attempted += 1;
                    a.detected += u64::from(top > v);
                }
            }
        }
        // Every configured Byzantine strategy should have had its chance, in
        // each role it was configured for.
        let mut expected: BTreeSet<(String, &'static str)> = BTreeSet::new();
        for m in &self.spir {
            let st = m.strategy();
            match st.attack() {
                Some(a) => expected.insert((a.label().to_string(), st.label())),
                None if st.is_byzantine() => expected.insert((format!("{}/spir", st.label()), st.label())),
                None => false,
            };
        }
        for sub in &self.subnets {
            for m in &sub.miners {
                let st = m.replica().strategy();
                match (st, st.attack()) {
                    (_, Some(a)) => expected.insert((format!("{}/smr", a.label()), st.label())),
                    (Strategy::CorruptPirAnswer, _) => expected.insert((format!("{}/mpir", st.label()), st.label())),
                    (_, None) if st.is_byzantine() => expected.insert((format!("{}/smr", st.label()), st.label())),
                    _ => false,
                };
            }
        }
        for (key, label) in expected {
            if self.report.attacks.get(&key).is_none_or(|a| a.attempted == 0) {
                self.report.idle_strategies.push(format!("{label} ({key})"));
            }
        }
        // Final state agreement among honest replicas of each subnet.
        for (s, sub) in self.subnets.iter().enumerate() {
            let digests: BTreeSet<Digest> = (0..sub.miners.len())
                .filter(|&p| sub.honest(p))
                .map(|p| sub.miners[p].replica().state_digest())
                .collect();
            if digests.len() > 1 {
                self.report.divergences += 1;
            }
            if let Some(d) = digests.first() {
                self.report.final_digests.insert(format!("subnet{s}"), d.to_string());
            }
            for m in &sub.miners {
                if !m.store().check_coherence() {
                    self.report.divergences += 1;
                }
            }
        }
        for m in &self.spir {
            self.report.final_digests.insert(format!("spir{}", m.id()), m.store().state_digest().to_string());
        }
        let stats: NetStats = self.net.stats();
        self.report.net = NetCounters {
            sent: stats.sent,
            delivered: stats.delivered,
            dropped: stats.dropped,
            pending: self.net.pending_messages(),
            conserved: self.net.conserved(),
        };
        self.report.final_tick = self.net.now();
        self.report.completed = completed;
        self.report.trace_digest = self.net.trace_digest().to_string();
        self.report
    }
}

fn op_file(op: &Op) -> &str {
    match op {
        Op::Upload { file, .. } | Op::Delete { file } | Op::Retrieve { file } => file,
    }
}

/// Result of a run plus the trace, when requested.
pub struct RunOutput {
    pub report: SimReport,
    pub trace: Option<Vec<String>>,
}

pub fn run(s: &Scenario) -> Result<SimReport, ScenarioError> {
    Ok(run_traced(s, false)?.report)
}

/// Runs `s` to completion (or `max_ticks`). With `keep_trace` the full trace
/// log is returned as well as its digest.
pub fn run_traced(s: &Scenario, keep_trace: bool) -> Result<RunOutput, ScenarioError> {
    s.validate()?;
    let mut w = World::new(s, keep_trace);
    for c in 0..w.clients.len() {
        w.start_next(c);
    }
    let mut completed = false;
    loop {
        let clients_done = w.clients.iter().all(|c| c.inflight.is_none() && c.ops.is_empty());
        if clients_done && w.net.pending_messages() == 0 {
            completed = true;
            break;
        }
        let Some(ev) = w.net.next_event() else {
            completed = clients_done;
            break;
        };
        if ev.tick > s.max_ticks {
            break;
        }
        match (ev.to, ev.payload) {
            (Addr::Client(c), Payload::Message(m)) => w.on_client(c as usize, ev.from, m),
            (Addr::Client(c), Payload::Timer(t)) => w.on_client_timer(c as usize, t),
            (Addr::Miner(id), payload) => match w.locate.get(&id).copied() {
                Some(Loc::Spir(i)) => {
                    if let Payload::Message(m) = payload {
                        w.on_spir(i, ev.from, m);
                    }
                }
                Some(Loc::Replica(sn, p)) => match payload {
                    Payload::Message(m) => w.on_replica(sn, p, ev.from, m),
                    Payload::Timer(t) => {
                        let mut out = Vec::new();
                        w.subnets[sn].miners[p].replica_mut().on_timer(t, &mut out);
                        w.route(sn, p, out);
                    }
                },
                None => {}
            },
        }
    }
    let trace = w.net.trace_log().map(<[String]>::to_vec);
    Ok(RunOutput { report: w.finalize(completed), trace })
}

/// Least-squares line through `(x, y)`: `(slope, intercept, r_squared)`.
pub fn linear_fit(points: &[(f64, f64)]) -> (f64, f64, f64) {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    (slope, intercept, r2)
}

/// Fastest of `reps` wall times in milliseconds of one SPIR answer over a
/// database of `n` random records, for each `n`. The minimum discards time lost
/// to other load on the machine.
pub fn spir_answer_latency(
    sizes: &[u64],
    record_len: usize,
    reps: usize,
    params: &SpirParams,
    seed: u64,
) -> Vec<(u64, f64)> {
    use crate::db::Database;
    use crate::pir_single::{s_answer, s_query};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sizes
        .iter()
        .map(|&n| {
            let mut db = Database::new(n, record_len);
            for i in 1..=n {
                let rec: Vec<u8> = (0..record_len).map(|_| rng.random()).collect();
                db.put(i, &rec).expect("in range");
            }
            let times: Vec<f64> = (0..reps.max(1))
                .map(|_| {
                    let idx = rng.random_range(1..=n);
                    let (_, q) = s_query(idx, n, record_len, 0, params, &mut rng).expect("valid query");
                    let t0 = Instant::now();
                    let a = s_answer(&db, &q).expect("answer");
                    std::hint::black_box(&a);
                    t0.elapsed().as_secs_f64() * 1e3
                })
                .collect();
            (n, times.iter().copied().fold(f64::INFINITY, f64::min))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> String {
        r#"
seed = 3
record_len = 48
[network]
delay_min = 1
delay_max = 1
[spir]
backend = "plain"
allow_insecure = true
"#
        .to_string()
    }

    #[test]
    fn rejects_bad_scenarios() {
        let s = base() + "[[subnets]]\nstrategies = [\"silent-leader\", \"mutate-index\", \"honest\", \"honest\"]\n";
        assert!(matches!(Scenario::from_toml(&s), Err(ScenarioError::Invalid(_))));
        let s = base() + "[[spir_miners]]\nstrategy = \"silent-leader\"\n";
        assert!(Scenario::from_toml(&s).is_err());
        let s = base() + "[[spir_miners]]\n[[ops]]\nclient = 0\nop = \"retrieve\"\nfile = \"a\"\n";
        assert!(Scenario::from_toml(&s).is_err());
        let s = base() + "bogus = 1\n[[spir_miners]]\n";
        assert!(matches!(Scenario::from_toml(&s), Err(ScenarioError::Parse(_))));
    }

    #[test]
    fn spir_round_counts() {
        let s = base()
            + r#"
[[spir_miners]]
[[ops]]
client = 0
op = "upload"
file = "a"
target = "spir:0"
[[ops]]
client = 0
op = "retrieve"
file = "a"
"#;
        let r = run(&Scenario::from_toml(&s).unwrap()).unwrap();
        assert!(r.passed(), "{}", r.summary());
        // One hop there and one back for each operation.
        assert_eq!(r.rows.iter().map(|x| x.latency_ticks).collect::<Vec<_>>(), vec![2, 2]);
        assert_eq!(r.max_pir_rounds, 1);
    }

    #[test]
    fn honest_subnet_latency_is_the_round_count() {
        let s = base()
            + r#"
[[subnets]]
strategies = ["honest", "honest", "honest", "honest"]
[[ops]]
client = 0
op = "upload"
file = "a"
target = "subnet:0"
"#;
        let r = run(&Scenario::from_toml(&s).unwrap()).unwrap();
        assert!(r.passed(), "{}", r.summary());
        // request, propose, prepare, commit, reply
        assert_eq!(r.rows[0].latency_ticks, 5);
        assert_eq!(r.view_changes, 0);
    }

    #[test]
    fn silent_leader_view_change_is_traced() {
        let s = base()
            + r#"
[smr]
view_timeout = 20
[[subnets]]
strategies = ["silent-leader", "honest", "honest", "honest"]
[[ops]]
client = 0
op = "upload"
file = "a"
target = "subnet:0"
[[ops]]
client = 0
op = "retrieve"
file = "a"
"#;
        let out = run_traced(&Scenario::from_toml(&s).unwrap(), true).unwrap();
        assert!(out.report.passed(), "{}", out.report.summary());
        assert!(out.trace.unwrap().iter().any(|l| l.contains("view-change v1")));
        assert_eq!(out.report.attacks["silent-leader/smr"], AttackStats { attempted: 1, detected: 1 });
    }

    #[test]
    fn generated_workload_is_deterministic() {
        let s = base()
            + r#"
[[spir_miners]]
[[spir_miners]]
strategy = "conflict-index"
[[subnets]]
strategies = ["honest", "honest", "corrupt-pir-answer", "honest"]
[workload]
clients = 3
files = 9
deletes = 3
retrievals = 8
"#;
        let sc = Scenario::from_toml(&s).unwrap();
        let a = run(&sc).unwrap();
        let b = run(&sc).unwrap();
        assert_eq!(a.trace_digest, b.trace_digest);
        assert!(a.passed(), "{}", a.summary());
        let mut other = sc.clone();
        other.seed += 1;
        assert_ne!(run(&other).unwrap().trace_digest, a.trace_digest);
    }

    #[test]
    fn fit_of_a_line() {
        let (m, b, r2) = linear_fit(&[(1.0, 3.0), (2.0, 5.0), (3.0, 7.0)]);
        assert!((m - 2.0).abs() < 1e-12 && (b - 1.0).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
    }
}
