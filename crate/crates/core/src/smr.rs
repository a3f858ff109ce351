//! Replication of a subnet's database.
//!
//! Two voting phases per block. The view's leader orders pending requests into
//! a block, with each request's proof built against the running state. Every
//! replica re-derives those proofs before casting a prepare vote. A prepare
//! quorum locks the block and triggers a commit vote, and a commit quorum
//! applies it.
//!
//! On timeout a replica moves to the next view and broadcasts its lock. The new
//! leader collects a quorum of these, waits one maximum message delay for
//! stragglers, and re-proposes the highest locked block if one exists. A
//! replica that sees `f + 1` peers in a higher view joins them. Replicas that
//! fall behind pull committed blocks with their commit certificates.
//!
//! A replica is a pure state machine: inputs are messages, requests and timer
//! tokens, and everything it wants done comes back as [`Output`]s.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::aca::{AcaState, Fid};
use crate::attacks::{self, Attack};
use crate::codec::{DecodeError, Reader, Writer};
use crate::db::LEN_PREFIX;
use crate::hash::Digest;
use crate::ledger::ChainId;
use crate::node::Strategy;
use crate::proofs::{genesis_digest, ProofChain, RejectReason, StateProof};
use crate::store::MinerStore;

/// Position of a replica within its subnet, `0..n`.
pub type ReplicaId = u32;

/// Votes needed for a certificate: `ceil(2n / 3)`.
pub fn quorum(n: usize) -> usize {
    (2 * n).div_ceil(3)
}

/// Largest tolerated number of faulty replicas.
pub fn max_faulty(n: usize) -> usize {
    n.saturating_sub(1) / 3
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RequestKind {
    Upload { fid: Fid, bytes: Vec<u8> },
    Delete { fid: Fid },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClientRequest {
    pub client: u32,
    pub id: u64,
    pub kind: RequestKind,
}

impl ClientRequest {
    pub fn upload(client: u32, id: u64, bytes: Vec<u8>) -> Self {
        Self { client, id, kind: RequestKind::Upload { fid: Fid::of(&bytes), bytes } }
    }

    pub fn delete(client: u32, id: u64, fid: Fid) -> Self {
        Self { client, id, kind: RequestKind::Delete { fid } }
    }

    pub fn key(&self) -> (u32, u64) {
        (self.client, self.id)
    }

    pub fn fid(&self) -> Fid {
        match &self.kind {
            RequestKind::Upload { fid, .. } | RequestKind::Delete { fid } => *fid,
        }
    }

    pub fn is_upload(&self) -> bool {
        matches!(self.kind, RequestKind::Upload { .. })
    }

    pub fn bytes(&self) -> Option<&[u8]> {
        match &self.kind {
            RequestKind::Upload { bytes, .. } => Some(bytes),
            RequestKind::Delete { .. } => None,
        }
    }

    pub fn encode_into(&self, w: &mut Writer) {
        w.u32(self.client).u64(self.id);
        match &self.kind {
            RequestKind::Upload { fid, bytes } => {
                w.u8(0).digest(&Digest(fid.0)).bytes(bytes);
            }
            RequestKind::Delete { fid } => {
                w.u8(1).digest(&Digest(fid.0));
            }
        }
    }

    pub fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let client = r.u32()?;
        let id = r.u64()?;
        let kind = match r.u8()? {
            0 => {
                let fid = Fid(r.digest()?.0);
                RequestKind::Upload { fid, bytes: r.bytes()?.to_vec() }
            }
            1 => RequestKind::Delete { fid: Fid(r.digest()?.0) },
            t => return Err(DecodeError::BadTag(t)),
        };
        Ok(Self { client, id, kind })
    }
}

/// A request and the proof the leader attached; `None` when the request is
/// deterministically rejected (bad hash, duplicate, absent, too large).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockEntry {
    pub request: ClientRequest,
    pub proof: Option<StateProof>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Block {
    pub height: u64,
    pub parent: Digest,
    /// View in which the block was first proposed.
    pub view: u64,
    pub leader: ReplicaId,
    pub entries: Vec<BlockEntry>,
}

impl Block {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u64(self.height).digest(&self.parent).u64(self.view).u32(self.leader);
        w.len_prefix(self.entries.len());
        for e in &self.entries {
            e.request.encode_into(&mut w);
            match &e.proof {
                Some(p) => {
                    w.u8(1);
                    p.encode_into(&mut w);
                }
                None => {
                    w.u8(0);
                }
            }
        }
        w.finish()
    }

    pub fn decode(buf: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(buf);
        let height = r.u64()?;
        let parent = r.digest()?;
        let view = r.u64()?;
        let leader = r.u32()?;
        let n = r.len_prefix(14)?;
        let mut entries = Vec::with_capacity(n);
        for _ in 0..n {
            let request = ClientRequest::decode_from(&mut r)?;
            let proof = match r.u8()? {
                0 => None,
                1 => Some(StateProof::decode_from(&mut r)?),
                t => return Err(DecodeError::BadTag(t)),
            };
            entries.push(BlockEntry { request, proof });
        }
        r.finish()?;
        Ok(Self { height, parent, view, leader, entries })
    }

    pub fn digest(&self) -> Digest {
        Digest(Sha256::digest(self.encode()).into())
    }
}

/// Keyed-hash authenticators standing in for signatures. The key of replica
/// `i` is derived from the subnet and `i`.
#[derive(Clone, Copy, Debug)]
pub struct Keyring {
    chain: ChainId,
}

impl Keyring {
    pub fn new(chain: ChainId) -> Self {
        Self { chain }
    }

    pub fn tag(&self, signer: ReplicaId, msg: &[u8]) -> Digest {
        let mut key = Sha256::new();
        key.update(b"PIR-DSN-SMR-KEY");
        key.update(self.chain.to_be_bytes());
        key.update(signer.to_be_bytes());
        let mut h = Sha256::new();
        h.update(key.finalize());
        h.update(msg);
        Digest(h.finalize().into())
    }

    pub fn check(&self, signer: ReplicaId, msg: &[u8], tag: &Digest) -> bool {
        self.tag(signer, msg) == *tag
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Phase {
    Prepare,
    Commit,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vote {
    pub phase: Phase,
    pub view: u64,
    pub height: u64,
    pub block: Digest,
    pub voter: ReplicaId,
    pub auth: Digest,
}

impl Vote {
    fn body(phase: Phase, view: u64, height: u64, block: &Digest) -> Vec<u8> {
        let mut w = Writer::new();
        w.u8(b'V').u8(phase as u8).u64(view).u64(height).digest(block);
        w.finish()
    }

    pub fn new(keys: &Keyring, phase: Phase, view: u64, height: u64, block: Digest, voter: ReplicaId) -> Self {
        let auth = keys.tag(voter, &Self::body(phase, view, height, &block));
        Self { phase, view, height, block, voter, auth }
    }

    pub fn is_authentic(&self, keys: &Keyring) -> bool {
        keys.check(self.voter, &Self::body(self.phase, self.view, self.height, &self.block), &self.auth)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u8(self.phase as u8).u64(self.view).u64(self.height).digest(&self.block).u32(self.voter).digest(&self.auth);
        w.finish()
    }

    pub fn decode(buf: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(buf);
        let phase = match r.u8()? {
            0 => Phase::Prepare,
            1 => Phase::Commit,
            t => return Err(DecodeError::BadTag(t)),
        };
        let v =
            Self { phase, view: r.u64()?, height: r.u64()?, block: r.digest()?, voter: r.u32()?, auth: r.digest()? };
        r.finish()?;
        Ok(v)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuorumCert {
    pub phase: Phase,
    pub view: u64,
    pub height: u64,
    pub block: Digest,
    pub votes: Vec<Vote>,
}

impl QuorumCert {
    /// Distinct authentic voters from `0..n`, all on the certified triple.
    pub fn is_valid(&self, n: usize, keys: &Keyring) -> bool {
        let mut voters = HashSet::new();
        for v in &self.votes {
            if v.phase != self.phase || v.view != self.view || v.height != self.height || v.block != self.block {
                return false;
            }
            if v.voter as usize >= n || !voters.insert(v.voter) || !v.is_authentic(keys) {
                return false;
            }
        }
        voters.len() >= quorum(n)
    }
}

/// A view-change announcement carrying the sender's lock.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NewView {
    pub view: u64,
    pub sender: ReplicaId,
    pub committed_height: u64,
    pub lock: Option<(QuorumCert, Block)>,
    pub auth: Digest,
}

impl NewView {
    fn body(view: u64, committed_height: u64, lock: Option<&Digest>) -> Vec<u8> {
        let mut w = Writer::new();
        w.u8(b'N').u64(view).u64(committed_height);
        if let Some(d) = lock {
            w.digest(d);
        }
        w.finish()
    }

    fn is_authentic(&self, keys: &Keyring) -> bool {
        let lock = self.lock.as_ref().map(|(qc, _)| qc.block);
        keys.check(self.sender, &Self::body(self.view, self.committed_height, lock.as_ref()), &self.auth)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SmrMsg {
    Propose {
        view: u64,
        block: Block,
        justify: Option<QuorumCert>,
        auth: Digest,
    },
    Vote(Vote),
    NewView(NewView),
    /// Asks for committed blocks from `from_height` on.
    SyncRequest {
        sender: ReplicaId,
        from_height: u64,
    },
    /// Committed blocks in height order, each with its commit certificate.
    Catchup {
        blocks: Vec<(Block, QuorumCert)>,
    },
}

impl SmrMsg {
    pub fn label(&self) -> String {
        match self {
            SmrMsg::Propose { view, block, .. } => {
                format!("propose v{view} h{} {} n{}", block.height, block.digest().short(), block.entries.len())
            }
            SmrMsg::Vote(v) => format!("{:?} v{} h{} {} r{}", v.phase, v.view, v.height, v.block.short(), v.voter),
            SmrMsg::NewView(nv) => format!("new-view v{} r{} h{}", nv.view, nv.sender, nv.committed_height),
            SmrMsg::SyncRequest { sender, from_height } => format!("sync r{sender} from h{from_height}"),
            SmrMsg::Catchup { blocks } => format!("catchup {} blocks", blocks.len()),
        }
    }
}

fn proposal_body(view: u64, block: &Digest) -> Vec<u8> {
    let mut w = Writer::new();
    w.u8(b'P').u64(view).digest(block);
    w.finish()
}

/// What happened to a request once its block committed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RequestOutcome {
    /// The proof with this digest was applied.
    Applied(Digest),
    Rejected,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Reply {
    pub replica: ReplicaId,
    pub client: u32,
    pub request: u64,
    pub outcome: RequestOutcome,
    /// Height of the block that carried the request.
    pub height: u64,
}

/// Why an honest replica refused to vote for a proposal.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BlockReject {
    #[error("block does not extend the committed chain")]
    WrongParent,
    #[error("proposer is not the leader of the view")]
    WrongLeader,
    #[error("entry {entry}: request already ordered")]
    Replay { entry: usize },
    #[error("entry {entry}: proof rejected: {reason}")]
    Proof { entry: usize, reason: RejectReason },
    #[error("entry {entry}: proof does not match the request")]
    Binding { entry: usize },
    #[error("entry {entry}: proof differs from the deterministic one")]
    NotDeterministic { entry: usize },
    #[error("entry {entry}: valid request left without a proof")]
    Skipped { entry: usize },
    #[error("block conflicts with the lock")]
    Locked,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Output {
    Broadcast(SmrMsg),
    Send(ReplicaId, SmrMsg),
    Reply(Reply),
    Timer {
        delay: u64,
        token: u64,
    },
    Committed {
        block: Block,
        qc_view: u64,
        state: Digest,
    },
    /// This replica refused a proposal.
    Rejected {
        view: u64,
        leader: ReplicaId,
        block: Digest,
        reason: BlockReject,
    },
    /// This replica, as a Byzantine leader, proposed a forged block.
    Forged {
        attack: Attack,
        view: u64,
        block: Digest,
    },
    ViewChange {
        view: u64,
    },
    /// A certified block failed to apply; the replica stops.
    Halted,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SmrConfig {
    /// Ticks without a commit before moving to the next view.
    pub view_timeout: u64,
    /// Upper bound on one message delay, used by a new leader to wait for
    /// straggling view-change messages.
    pub delay_max: u64,
    pub max_batch: usize,
}

impl Default for SmrConfig {
    fn default() -> Self {
        Self { view_timeout: 40, delay_max: 3, max_batch: 16 }
    }
}

const TIMER_VIEW: u64 = 1 << 62;
const TIMER_LEADER: u64 = 2 << 62;
const TIMER_KIND: u64 = 3 << 62;
const CATCHUP_LIMIT: usize = 64;

#[derive(Clone, Debug)]
pub struct Replica {
    id: ReplicaId,
    n: usize,
    chain: ChainId,
    keys: Keyring,
    cfg: SmrConfig,
    strategy: Strategy,
    rng: ChaCha8Rng,

    view: u64,
    store: MinerStore,
    head: Digest,
    height: u64,
    tip: Digest,
    log: Vec<(Block, QuorumCert)>,

    pending: VecDeque<ClientRequest>,
    pending_keys: HashSet<(u32, u64)>,
    done: HashMap<(u32, u64), (RequestOutcome, u64)>,

    blocks: HashMap<Digest, Block>,
    votes: BTreeMap<(u64, Phase, u64, Digest), BTreeMap<ReplicaId, Vote>>,
    commit_certs: HashMap<u64, QuorumCert>,
    voted: HashSet<(Phase, u64, u64)>,
    accepted: HashMap<(u64, u64), Digest>,
    future: Vec<(u64, Block, Option<QuorumCert>)>,
    lock: Option<(QuorumCert, Block)>,

    proposed: Option<(u64, u64)>,
    ready_view: Option<u64>,
    reproposal: Option<(QuorumCert, Block)>,
    new_views: BTreeMap<u64, BTreeMap<ReplicaId, NewView>>,
    peer_views: BTreeMap<ReplicaId, u64>,
    leader_wait: Option<u64>,
    timer: Option<u64>,
    timer_seq: u64,
    idle_views: u64,
    sync_asked: u64,
    halted: bool,
}

impl Replica {
    pub fn new(
        id: ReplicaId,
        n: usize,
        chain: ChainId,
        record_len: usize,
        cfg: SmrConfig,
        strategy: Strategy,
        seed: u64,
    ) -> Self {
        assert!((id as usize) < n);
        let genesis = genesis_digest(chain);
        Self {
            id,
            n,
            chain,
            keys: Keyring::new(chain),
            cfg,
            strategy,
            rng: ChaCha8Rng::seed_from_u64(seed ^ (u64::from(id) << 32) ^ u64::from(chain)),
            view: 0,
            store: MinerStore::new(record_len),
            head: genesis,
            height: 0,
            tip: genesis,
            log: Vec::new(),
            pending: VecDeque::new(),
            pending_keys: HashSet::new(),
            done: HashMap::new(),
            blocks: HashMap::new(),
            votes: BTreeMap::new(),
            commit_certs: HashMap::new(),
            voted: HashSet::new(),
            accepted: HashMap::new(),
            future: Vec::new(),
            lock: None,
            proposed: None,
            ready_view: Some(0),
            reproposal: None,
            new_views: BTreeMap::new(),
            peer_views: BTreeMap::new(),
            leader_wait: None,
            timer: None,
            timer_seq: 0,
            idle_views: 0,
            sync_asked: 0,
            halted: false,
        }
    }

    pub fn id(&self) -> ReplicaId {
        self.id
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn chain(&self) -> ChainId {
        self.chain
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn view(&self) -> u64 {
        self.view
    }

    /// Committed height; also the number of blocks applied.
    pub fn height(&self) -> u64 {
        self.height
    }

    pub fn store(&self) -> &MinerStore {
        &self.store
    }

    /// Digest of the last applied proof.
    pub fn proof_head(&self) -> Digest {
        self.head
    }

    pub fn committed(&self) -> &[(Block, QuorumCert)] {
        &self.log
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_halted(&self) -> bool {
        self.halted
    }

    pub fn leader_of(&self, view: u64) -> ReplicaId {
        (view % self.n as u64) as ReplicaId
    }

    pub fn is_leader(&self) -> bool {
        self.leader_of(self.view) == self.id
    }

    fn f(&self) -> usize {
        max_faulty(self.n)
    }

    /// Attackers vote for anything and, when leading, forge.
    fn attacking(&self) -> bool {
        self.strategy.attack().is_some()
    }

    /// Digest of the applied state: accumulator, database and files.
    pub fn state_digest(&self) -> Digest {
        self.store.state_digest()
    }

    // ----- inputs -----

    pub fn on_request(&mut self, req: ClientRequest, out: &mut Vec<Output>) {
        if self.halted {
            return;
        }
        if let Some(&(outcome, height)) = self.done.get(&req.key()) {
            out.push(Output::Reply(Reply { replica: self.id, client: req.client, request: req.id, outcome, height }));
            return;
        }
        if self.pending_keys.insert(req.key()) {
            self.pending.push_back(req);
            if self.timer.is_none() {
                self.arm_view_timer(out);
            }
        }
        self.progress(out);
    }

    pub fn on_message(&mut self, msg: SmrMsg, out: &mut Vec<Output>) {
        if self.halted {
            return;
        }
        match msg {
            SmrMsg::Propose { view, block, justify, auth } => self.on_propose(view, block, justify, auth, out),
            SmrMsg::Vote(v) => self.on_vote(v, out),
            SmrMsg::NewView(nv) => self.on_new_view(nv, out),
            SmrMsg::SyncRequest { sender, from_height } => self.on_sync_request(sender, from_height, out),
            SmrMsg::Catchup { blocks } => self.on_catchup(blocks, out),
        }
        self.progress(out);
    }

    pub fn on_timer(&mut self, token: u64, out: &mut Vec<Output>) {
        if self.halted {
            return;
        }
        match token & TIMER_KIND {
            TIMER_VIEW if self.timer == Some(token) => {
                self.timer = None;
                if !self.pending.is_empty() {
                    self.start_view_change(self.view + 1, out);
                }
            }
            TIMER_LEADER if self.leader_wait == Some(token & !TIMER_KIND) => {
                self.leader_wait = None;
                self.begin_leading(out);
            }
            _ => {}
        }
        self.progress(out);
    }

    // ----- proposing -----

    /// Orders `requests` into the next block, building proofs against a
    /// copy of the committed state. Requests that cannot apply get no proof.
    pub fn build_block(&self, requests: Vec<ClientRequest>) -> Block {
        let mut aca = self.store.aca().clone();
        let mut head = self.head;
        let mut entries = Vec::with_capacity(requests.len());
        for request in requests {
            let proof = expected_proof(&mut aca, &request, self.store.record_len(), head);
            if let Some(p) = &proof {
                head = p.digest();
            }
            entries.push(BlockEntry { request, proof });
        }
        Block { height: self.height + 1, parent: self.tip, view: self.view, leader: self.id, entries }
    }

    /// Replaces one entry's proof with a forgery. Entries after it are
    /// dropped since they would chain from the forged proof.
    fn forge_block(&mut self, block: &mut Block, attack: Attack) -> bool {
        let mut aca = self.store.aca().clone();
        let mut head = self.head;
        for i in 0..block.entries.len() {
            let e = &block.entries[i];
            let fits = match attack {
                Attack::ConflictIndex | Attack::WrongVacantIndex => e.request.is_upload() && e.proof.is_some(),
                Attack::DeleteWrongFid | Attack::FakeDelete => !e.request.is_upload() && e.proof.is_some(),
                Attack::MutateIndex => false,
            };
            if fits {
                if let Some(p) = attacks::forge(attack, &aca, e.request.fid(), head, &mut self.rng) {
                    block.entries[i].proof = Some(p);
                    block.entries.truncate(i + 1);
                    return true;
                }
            }
            if let Some(p) = &block.entries[i].proof {
                crate::ledger::apply_proof(&mut aca, p).expect("honest entry");
                head = p.digest();
            }
        }
        if attack == Attack::MutateIndex {
            let Some(p) = attacks::mutate_index(&aca, head, &mut self.rng) else {
                return false;
            };
            let fid = p.fid();
            let kind = if p.is_upload() {
                let bytes = self
                    .store
                    .file(&fid)
                    .map(<[u8]>::to_vec)
                    .or_else(|| {
                        block
                            .entries
                            .iter()
                            .find(|e| e.request.fid() == fid)
                            .and_then(|e| e.request.bytes().map(<[u8]>::to_vec))
                    })
                    .unwrap_or_default();
                RequestKind::Upload { fid, bytes }
            } else {
                RequestKind::Delete { fid }
            };
            let request = ClientRequest { client: u32::MAX, id: self.rng.random(), kind };
            block.entries.push(BlockEntry { request, proof: Some(p) });
            return true;
        }
        false
    }

    fn try_propose(&mut self, out: &mut Vec<Output>) {
        if !self.is_leader() || self.ready_view != Some(self.view) || self.strategy == Strategy::SilentLeader {
            return;
        }
        let next = (self.view, self.height + 1);
        if self.proposed == Some(next) {
            return;
        }
        let (block, justify) = match self.reproposal.take() {
            Some((qc, b)) if b.height == self.height + 1 && b.parent == self.tip => (b, Some(qc)),
            _ => {
                let batch: Vec<ClientRequest> = self
                    .pending
                    .iter()
                    .filter(|r| !self.done.contains_key(&r.key()))
                    .take(self.cfg.max_batch)
                    .cloned()
                    .collect();
                if batch.is_empty() {
                    return;
                }
                let mut block = self.build_block(batch);
                if let Some(attack) = self.strategy.attack() {
                    if self.forge_block(&mut block, attack) {
                        out.push(Output::Forged { attack, view: self.view, block: block.digest() });
                    }
                }
                (block, None)
            }
        };
        self.proposed = Some(next);
        let auth = self.keys.tag(self.id, &proposal_body(self.view, &block.digest()));
        let msg = SmrMsg::Propose { view: self.view, block: block.clone(), justify: justify.clone(), auth };
        out.push(Output::Broadcast(msg));
        self.on_propose(self.view, block, justify, auth, out);
    }

    /// Leader of a new view: pick the highest valid lock reported and start.
    fn begin_leading(&mut self, out: &mut Vec<Output>) {
        if !self.is_leader() || self.ready_view == Some(self.view) {
            return;
        }
        self.ready_view = Some(self.view);
        let mut best: Option<(QuorumCert, Block)> =
            self.lock.clone().filter(|(_, b)| b.height == self.height + 1 && b.parent == self.tip);
        if let Some(nvs) = self.new_views.get(&self.view) {
            for nv in nvs.values() {
                let Some((qc, b)) = &nv.lock else { continue };
                if b.height != self.height + 1 || b.parent != self.tip {
                    continue;
                }
                if qc.phase != Phase::Prepare || qc.block != b.digest() || !qc.is_valid(self.n, &self.keys) {
                    continue;
                }
                if best.as_ref().is_none_or(|(bq, _)| qc.view > bq.view) {
                    best = Some((qc.clone(), b.clone()));
                }
            }
        }
        self.reproposal = best;
        self.try_propose(out);
    }

    // ----- validation -----

    /// Re-derives every proof in `block` from the committed state and
    /// requires an exact match, after the public proof checks.
    pub fn validate_block(&self, block: &Block) -> Result<(), BlockReject> {
        if block.height != self.height + 1 || block.parent != self.tip {
            return Err(BlockReject::WrongParent);
        }
        if block.leader != self.leader_of(block.view) {
            return Err(BlockReject::WrongLeader);
        }
        let mut aca = self.store.aca().clone();
        let mut chain = ProofChain::resume(self.head, aca.roots());
        let mut seen = HashSet::new();
        for (entry, e) in block.entries.iter().enumerate() {
            let key = e.request.key();
            if !seen.insert(key) || self.done.contains_key(&key) {
                return Err(BlockReject::Replay { entry });
            }
            let expected = expected_proof(&mut aca, &e.request, self.store.record_len(), chain.head());
            match &e.proof {
                None if expected.is_some() => return Err(BlockReject::Skipped { entry }),
                None => {}
                Some(p) => {
                    chain.extend(p).map_err(|reason| BlockReject::Proof { entry, reason })?;
                    if p.fid() != e.request.fid() || p.is_upload() != e.request.is_upload() {
                        return Err(BlockReject::Binding { entry });
                    }
                    if expected.as_ref() != Some(p) {
                        return Err(BlockReject::NotDeterministic { entry });
                    }
                }
            }
        }
        Ok(())
    }

    fn lock_allows(&self, block: &Block, digest: &Digest, justify: Option<&QuorumCert>) -> bool {
        let Some((lqc, lb)) = &self.lock else { return true };
        if lb.height != block.height || lqc.block == *digest {
            return true;
        }
        justify.is_some_and(|j| {
            j.phase == Phase::Prepare && j.block == *digest && j.view > lqc.view && j.is_valid(self.n, &self.keys)
        })
    }

    fn on_propose(
        &mut self,
        view: u64,
        block: Block,
        justify: Option<QuorumCert>,
        auth: Digest,
        out: &mut Vec<Output>,
    ) {
        let leader = self.leader_of(view);
        let digest = block.digest();
        if !self.keys.check(leader, &proposal_body(view, &digest), &auth) {
            return;
        }
        if block.height <= self.height {
            if block.height < self.height {
                self.send_catchup(leader, block.height, out);
            }
            return;
        }
        self.blocks.insert(digest, block.clone());
        if view > self.view || block.height > self.height + 1 {
            if block.height > self.height + 1 {
                self.request_sync(leader, block.height - 1, out);
            }
            self.future.push((view, block, justify));
            return;
        }
        if view < self.view {
            return;
        }
        if self.accepted.contains_key(&(view, block.height)) {
            return;
        }
        self.accepted.insert((view, block.height), digest);
        if !self.attacking() {
            let verdict = if self.lock_allows(&block, &digest, justify.as_ref()) {
                self.validate_block(&block)
            } else {
                Err(BlockReject::Locked)
            };
            if let Err(reason) = verdict {
                out.push(Output::Rejected { view, leader, block: digest, reason });
                // The leader proposed something invalid; no point waiting.
                if self.lock.as_ref().is_none_or(|(_, b)| b.digest() != digest) {
                    self.start_view_change(self.view + 1, out);
                }
                return;
            }
        }
        self.cast(Phase::Prepare, view, block.height, digest, out);
    }

    // ----- voting -----

    fn cast(&mut self, phase: Phase, view: u64, height: u64, digest: Digest, out: &mut Vec<Output>) {
        if !self.voted.insert((phase, view, height)) {
            return;
        }
        let v = Vote::new(&self.keys, phase, view, height, digest, self.id);
        out.push(Output::Broadcast(SmrMsg::Vote(v.clone())));
        self.on_vote(v, out);
    }

    fn on_vote(&mut self, v: Vote, out: &mut Vec<Output>) {
        if v.voter as usize >= self.n || v.height <= self.height || !v.is_authentic(&self.keys) {
            return;
        }
        let key = (v.height, v.phase, v.view, v.block);
        let (height, phase, view, block) = key;
        let tally = self.votes.entry(key).or_default();
        tally.insert(v.voter, v);
        if tally.len() < quorum(self.n) {
            return;
        }
        let qc = QuorumCert { phase, view, height, block, votes: tally.values().cloned().collect() };
        match phase {
            Phase::Prepare => {
                if view != self.view || height != self.height + 1 {
                    return;
                }
                let Some(b) = self.blocks.get(&block).cloned() else { return };
                if self.accepted.get(&(view, height)) != Some(&block) && !self.attacking() {
                    return;
                }
                if self.lock.as_ref().is_none_or(|(l, _)| l.view < view || l.height < height) {
                    self.lock = Some((qc, b));
                }
                self.cast(Phase::Commit, view, height, block, out);
            }
            Phase::Commit => {
                self.commit_certs.entry(height).or_insert(qc);
                if height > self.height + 1 {
                    let from = self.leader_of(view);
                    self.request_sync(from, height - 1, out);
                }
            }
        }
    }

    // ----- commit -----

    fn progress(&mut self, out: &mut Vec<Output>) {
        loop {
            let next = self.height + 1;
            let Some(qc) = self.commit_certs.get(&next).cloned() else { break };
            let Some(block) = self.blocks.get(&qc.block).cloned() else {
                let from = self.leader_of(qc.view);
                self.request_sync(from, self.height, out);
                break;
            };
            if block.parent != self.tip {
                self.commit_certs.remove(&next);
                continue;
            }
            self.commit(block, qc, out);
            if self.halted {
                return;
            }
        }
        let current: Vec<_> = std::mem::take(&mut self.future);
        for (view, block, justify) in current {
            if view < self.view || block.height <= self.height {
                continue;
            }
            if view == self.view && block.height == self.height + 1 {
                let digest = block.digest();
                let auth = self.keys.tag(self.leader_of(view), &proposal_body(view, &digest));
                self.on_propose(view, block, justify, auth, out);
            } else {
                self.future.push((view, block, justify));
            }
        }
        self.try_propose(out);
    }

    fn commit(&mut self, block: Block, qc: QuorumCert, out: &mut Vec<Output>) {
        let height = block.height;
        for e in &block.entries {
            let key = e.request.key();
            let outcome = match &e.proof {
                Some(p) => {
                    if self.store.apply(p, e.request.bytes()).is_err() {
                        self.halted = true;
                        out.push(Output::Halted);
                        return;
                    }
                    self.head = p.digest();
                    RequestOutcome::Applied(self.head)
                }
                None => RequestOutcome::Rejected,
            };
            self.done.insert(key, (outcome, height));
            if self.pending_keys.remove(&key) {
                self.pending.retain(|r| r.key() != key);
            }
            if e.request.client != u32::MAX {
                out.push(Output::Reply(Reply {
                    replica: self.id,
                    client: e.request.client,
                    request: e.request.id,
                    outcome,
                    height,
                }));
            }
        }
        self.height = height;
        self.tip = block.digest();
        if self.lock.as_ref().is_some_and(|(_, b)| b.height <= height) {
            self.lock = None;
        }
        self.votes = self.votes.split_off(&(height + 1, Phase::Prepare, 0, Digest([0; 32])));
        self.commit_certs.retain(|&h, _| h > height);
        self.blocks.retain(|_, b| b.height > height);
        self.accepted.retain(|&(_, h), _| h > height);
        self.voted.retain(|&(_, _, h)| h > height);
        self.idle_views = 0;
        out.push(Output::Committed { block: block.clone(), qc_view: qc.view, state: self.state_digest() });
        self.log.push((block, qc));
        self.timer = None;
        if !self.pending.is_empty() {
            self.arm_view_timer(out);
        }
    }

    // ----- view change -----

    fn arm_view_timer(&mut self, out: &mut Vec<Output>) {
        self.timer_seq += 1;
        let token = TIMER_VIEW | self.timer_seq;
        self.timer = Some(token);
        let backoff = 1 + self.idle_views.min(8);
        out.push(Output::Timer { delay: self.cfg.view_timeout * backoff, token });
    }

    fn start_view_change(&mut self, view: u64, out: &mut Vec<Output>) {
        if view <= self.view {
            return;
        }
        self.view = view;
        self.idle_views += 1;
        self.ready_view = None;
        self.reproposal = None;
        self.leader_wait = None;
        self.new_views = self.new_views.split_off(&view);
        out.push(Output::ViewChange { view });
        let lock_digest = self.lock.as_ref().map(|(qc, _)| qc.block);
        let auth = self.keys.tag(self.id, &NewView::body(view, self.height, lock_digest.as_ref()));
        let nv = NewView { view, sender: self.id, committed_height: self.height, lock: self.lock.clone(), auth };
        if !(self.strategy == Strategy::SilentLeader && self.leader_of(view) == self.id) {
            out.push(Output::Broadcast(SmrMsg::NewView(nv.clone())));
        }
        self.timer = None;
        if !self.pending.is_empty() {
            self.arm_view_timer(out);
        }
        self.on_new_view(nv, out);
    }

    fn on_new_view(&mut self, nv: NewView, out: &mut Vec<Output>) {
        if nv.sender as usize >= self.n || !nv.is_authentic(&self.keys) {
            return;
        }
        if let Some((qc, b)) = &nv.lock {
            if qc.block != b.digest() {
                return;
            }
        }
        let sender = nv.sender;
        if nv.committed_height < self.height {
            self.send_catchup(sender, nv.committed_height + 1, out);
        } else if nv.committed_height > self.height {
            self.request_sync(sender, nv.committed_height, out);
        }
        let seen = self.peer_views.entry(sender).or_insert(0);
        *seen = (*seen).max(nv.view);
        let view = nv.view;
        if view >= self.view {
            self.new_views.entry(view).or_default().insert(sender, nv);
        }

        // Join a view that f + 1 peers have moved to.
        let mut ahead: Vec<u64> = self.peer_views.values().copied().filter(|&v| v > self.view).collect();
        if ahead.len() > self.f() {
            ahead.sort_unstable_by(|a, b| b.cmp(a));
            let target = ahead[self.f()];
            self.start_view_change(target, out);
        }

        if self.is_leader() && self.ready_view != Some(self.view) && self.leader_wait.is_none() {
            let have = self.new_views.get(&self.view).map_or(0, BTreeMap::len);
            if have >= quorum(self.n) {
                if self.cfg.delay_max == 0 {
                    self.begin_leading(out);
                } else {
                    self.leader_wait = Some(self.view);
                    out.push(Output::Timer { delay: self.cfg.delay_max, token: TIMER_LEADER | self.view });
                }
            }
        }
    }

    // ----- catch-up -----

    fn request_sync(&mut self, peer: ReplicaId, upto: u64, out: &mut Vec<Output>) {
        if upto <= self.height || upto <= self.sync_asked || peer == self.id {
            return;
        }
        self.sync_asked = upto;
        out.push(Output::Send(peer, SmrMsg::SyncRequest { sender: self.id, from_height: self.height + 1 }));
    }

    fn on_sync_request(&mut self, sender: ReplicaId, from_height: u64, out: &mut Vec<Output>) {
        if (sender as usize) < self.n {
            self.send_catchup(sender, from_height, out);
        }
    }

    fn send_catchup(&mut self, peer: ReplicaId, from_height: u64, out: &mut Vec<Output>) {
        if peer == self.id || from_height == 0 || from_height > self.height {
            return;
        }
        let start = from_height as usize - 1;
        let blocks: Vec<_> = self.log[start..].iter().take(CATCHUP_LIMIT).cloned().collect();
        out.push(Output::Send(peer, SmrMsg::Catchup { blocks }));
    }

    fn on_catchup(&mut self, blocks: Vec<(Block, QuorumCert)>, out: &mut Vec<Output>) {
        for (block, qc) in blocks {
            if block.height <= self.height {
                continue;
            }
            let digest = block.digest();
            if qc.phase != Phase::Commit
                || qc.block != digest
                || qc.height != block.height
                || !qc.is_valid(self.n, &self.keys)
            {
                return;
            }
            self.blocks.insert(digest, block);
            self.commit_certs.entry(qc.height).or_insert(qc);
        }
        self.sync_asked = self.sync_asked.min(self.height);
        let _ = out;
    }
}

/// The proof an honest leader attaches to `request`, applying it to `aca`.
fn expected_proof(aca: &mut AcaState, request: &ClientRequest, record_len: usize, head: Digest) -> Option<StateProof> {
    match &request.kind {
        RequestKind::Upload { fid, bytes } => {
            if Fid::of(bytes) != *fid || bytes.len() + LEN_PREFIX > record_len {
                return None;
            }
            attacks::honest(aca, true, *fid, head)
        }
        RequestKind::Delete { fid } => attacks::honest(aca, false, *fid, head),
    }
}
