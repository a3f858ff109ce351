//! Client workflows: upload, delete and private retrieval.
//!
//! Retrievals come in two halves so the simulator can put the network in the
//! middle (`*_start` builds the query, `*_finish` checks the answer). The
//! `retrieve_*` functions run both halves against in-process miners.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use rand::Rng;
use thiserror::Error;

use crate::aca::Fid;
use crate::ledger::{Ledger, Lookup};
use crate::node::{MpirMiner, MultiResponse, QueryError, SpirMiner};
use crate::pir_multi::{m_query, m_reconstruct, MultiAnswer, MultiClientState, MultiError, MultiQuery};
use crate::pir_single::{
    decode_record, s_decrypt, s_query, Backend, Hint, SingleAnswer, SingleClientState, SingleQuery, SpirParams,
};
use crate::proofs::RejectReason;
use crate::smr::{max_faulty, RequestOutcome};
use crate::store::StoreError;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Outcome {
    Recovered,
    /// The answer decoded to something other than the file.
    IntegrityFailure,
    Absent,
    /// Multi-server retrieval succeeded; `faulty` lists miners whose answers
    /// were wrong.
    RobustRecovered {
        faulty: BTreeSet<u32>,
    },
    Unrecoverable {
        suspects: BTreeSet<u32>,
    },
}

impl Outcome {
    pub fn label(&self) -> &'static str {
        match self {
            Outcome::Recovered => "recovered",
            Outcome::IntegrityFailure => "integrity-failure",
            Outcome::Absent => "absent",
            Outcome::RobustRecovered { .. } => "robust-recovered",
            Outcome::Unrecoverable { .. } => "unrecoverable",
        }
    }

    pub fn is_success(&self) -> bool {
        matches!(self, Outcome::Recovered | Outcome::RobustRecovered { .. })
    }
}

#[derive(Clone, Debug)]
pub struct RetrievalReport {
    pub fid: Fid,
    pub outcome: Outcome,
    /// The file, present only when its hash matched `fid`.
    pub bytes: Option<Vec<u8>>,
    /// Query/answer exchanges performed.
    pub pir_rounds: u32,
    pub query_bytes: usize,
    pub answer_bytes: usize,
    /// Client-side compute time.
    pub wall: Duration,
}

impl RetrievalReport {
    fn absent(fid: Fid) -> Self {
        Self {
            fid,
            outcome: Outcome::Absent,
            bytes: None,
            pir_rounds: 0,
            query_bytes: 0,
            answer_bytes: 0,
            wall: Duration::ZERO,
        }
    }
}

/// Applies the FID check to a decoded record.
fn judge(fid: Fid, record: &[u8]) -> (Outcome, Option<Vec<u8>>) {
    if record.iter().all(|&b| b == 0) {
        return (Outcome::Absent, None);
    }
    match decode_record(record) {
        Some(bytes) if Fid::of(&bytes) == fid => (Outcome::Recovered, Some(bytes)),
        _ => (Outcome::IntegrityFailure, None),
    }
}

/// An outstanding single-server retrieval.
#[derive(Clone, Debug)]
pub struct SpirRetrieval {
    pub fid: Fid,
    pub lookup: Lookup,
    /// Miner the query goes to.
    pub miner: u32,
    state: SingleClientState,
    query_bytes: usize,
    wall: Duration,
}

/// Looks `fid` up and builds the query. `Err` carries the final report when
/// the directory has no entry.
pub fn spir_start<R: Rng + ?Sized>(
    fid: Fid,
    ledger: &Ledger,
    record_len: usize,
    params: &SpirParams,
    rng: &mut R,
) -> Result<(SpirRetrieval, SingleQuery), Box<RetrievalReport>> {
    let t0 = Instant::now();
    let Some(lookup) = ledger.lookup(&fid) else {
        return Err(Box::new(RetrievalReport::absent(fid)));
    };
    let version = ledger.height(lookup.chain);
    let (state, q) = s_query(lookup.index, lookup.db_size, record_len, version, params, rng)
        .expect("ledger indexes lie within db_size");
    let miner = lookup.miners[0];
    let r = SpirRetrieval { fid, lookup, miner, state, query_bytes: q.encode().len(), wall: t0.elapsed() };
    Ok((r, q))
}

/// Decrypts the answer and applies the FID check.
pub fn spir_finish(r: SpirRetrieval, answer: &SingleAnswer, hint: Option<&Hint>) -> RetrievalReport {
    let t0 = Instant::now();
    let (outcome, bytes) = match s_decrypt(&r.state, answer, hint) {
        Ok(rec) => judge(r.fid, &rec),
        Err(_) => (Outcome::IntegrityFailure, None),
    };
    RetrievalReport {
        fid: r.fid,
        outcome,
        bytes,
        pir_rounds: 1,
        query_bytes: r.query_bytes,
        answer_bytes: answer.size_bytes(),
        wall: r.wall + t0.elapsed(),
    }
}

/// One complete single-server retrieval. A refusal for a stale query is
/// answered by refreshing the directory and asking once more.
pub fn retrieve_spir<R: Rng + ?Sized>(
    fid: Fid,
    ledger: &Ledger,
    miner: &mut SpirMiner,
    rng: &mut R,
) -> RetrievalReport {
    let params = miner.params().clone();
    let record_len = miner.store().record_len();
    let mut rounds = 0;
    for _ in 0..2 {
        let (r, q) = match spir_start(fid, ledger, record_len, &params, rng) {
            Ok(x) => x,
            Err(report) => return *report,
        };
        rounds += 1;
        match miner.handle_query(&q) {
            Ok(a) => {
                let hint = (params.backend == Backend::Lwe).then(|| miner.hint());
                let mut report = spir_finish(r, &a, hint.as_deref());
                report.pir_rounds = rounds;
                return report;
            }
            Err(QueryError::Stale(_)) => continue,
            Err(QueryError::Malformed(_)) => break,
        }
    }
    RetrievalReport { outcome: Outcome::IntegrityFailure, pir_rounds: rounds, ..RetrievalReport::absent(fid) }
}

/// An outstanding multi-server retrieval.
#[derive(Clone, Debug)]
pub struct MpirRetrieval {
    pub fid: Fid,
    pub lookup: Lookup,
    state: MultiClientState,
    query_bytes: usize,
    wall: Duration,
}

impl MpirRetrieval {
    /// Miner ids in share order: the miner at position `i` gets share `i + 1`.
    pub fn miners(&self) -> &[u32] {
        &self.lookup.miners
    }
}

/// Shares a query across the subnet holding `fid`, with threshold
/// `t = floor((n - 1) / 3)`.
pub fn mpir_start<R: Rng + ?Sized>(
    fid: Fid,
    ledger: &Ledger,
    record_len: usize,
    rng: &mut R,
) -> Result<(MpirRetrieval, Vec<(u32, MultiQuery)>), Box<RetrievalReport>> {
    let t0 = Instant::now();
    let Some(lookup) = ledger.lookup(&fid) else {
        return Err(Box::new(RetrievalReport::absent(fid)));
    };
    let n = lookup.miners.len();
    let version = ledger.height(lookup.chain);
    let (state, qs) = m_query(lookup.index, lookup.db_size, record_len, version, n, max_faulty(n), rng)
        .expect("ledger indexes lie within db_size");
    let query_bytes = qs.iter().map(|q| q.encode().len()).sum();
    let addressed = lookup.miners.iter().copied().zip(qs).collect();
    Ok((MpirRetrieval { fid, lookup, state, query_bytes, wall: t0.elapsed() }, addressed))
}

/// Reconstructs from whatever answers arrived, keyed by the sending miner.
/// The sender, not the answer's own server field, decides which share an
/// answer is matched against.
pub fn mpir_finish(r: MpirRetrieval, answers: Vec<(u32, MultiAnswer)>) -> RetrievalReport {
    let t0 = Instant::now();
    let answer_bytes = answers.iter().map(|(_, a)| a.size_bytes()).sum();
    let mut placed = Vec::with_capacity(answers.len());
    for (miner, mut a) in answers {
        if let Some(pos) = r.lookup.miners.iter().position(|&m| m == miner) {
            a.server = pos as u32 + 1;
            placed.push(a);
        }
    }
    let to_ids = |servers: &BTreeSet<u32>| servers.iter().map(|&s| r.lookup.miners[s as usize - 1]).collect();
    let (outcome, bytes) = match m_reconstruct(&r.state, &placed) {
        Ok(res) => match judge(r.fid, &res.record) {
            (Outcome::Recovered, bytes) => (Outcome::RobustRecovered { faulty: to_ids(&res.faulty) }, bytes),
            // The decoder settled on a wrong record: more servers lied than
            // the bound allows.
            (Outcome::IntegrityFailure, _) => (Outcome::Unrecoverable { suspects: to_ids(&res.faulty) }, None),
            other => other,
        },
        Err(MultiError::Unrecoverable { suspects }) => (Outcome::Unrecoverable { suspects: to_ids(&suspects) }, None),
        Err(_) => (Outcome::Unrecoverable { suspects: BTreeSet::new() }, None),
    };
    RetrievalReport {
        fid: r.fid,
        outcome,
        bytes,
        pir_rounds: 1,
        query_bytes: r.query_bytes,
        answer_bytes,
        wall: r.wall + t0.elapsed(),
    }
}

/// One complete multi-server retrieval against in-process replicas, which
/// must be at the version the ledger reports.
pub fn retrieve_mpir<R: Rng + ?Sized>(
    fid: Fid,
    ledger: &Ledger,
    miners: &mut [MpirMiner],
    rng: &mut R,
) -> RetrievalReport {
    let record_len = miners.first().map_or(0, |m| m.store().record_len());
    let (r, queries) = match mpir_start(fid, ledger, record_len, rng) {
        Ok(x) => x,
        Err(report) => return *report,
    };
    let mut answers = Vec::new();
    for (id, q) in queries {
        if let Some(m) = miners.iter_mut().find(|m| m.id() == id) {
            if let MultiResponse::Answer(a) = m.handle_multi_query(0, q) {
                answers.push((id, a));
            }
        }
    }
    mpir_finish(r, answers)
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ClientError {
    #[error("miner refused: {0}")]
    Store(#[from] StoreError),
    #[error("ledger rejected the proof: {0}")]
    Rejected(RejectReason),
}

/// Uploads to one miner. Succeeds iff the ledger accepted the proof.
pub fn upload(bytes: &[u8], miner: &mut SpirMiner, ledger: &mut Ledger) -> Result<Fid, ClientError> {
    let fid = Fid::of(bytes);
    let m = miner.handle_upload(ledger, fid, bytes)?;
    m.primary.verdict.map(|_| fid).map_err(ClientError::Rejected)
}

/// Tries each miner in turn until one gets an upload accepted. Returns the FID,
/// the miner that stored it and the rejections seen on the way.
pub fn upload_any(
    bytes: &[u8],
    miners: &mut [SpirMiner],
    ledger: &mut Ledger,
) -> Result<(Fid, u32, Vec<(u32, ClientError)>), Vec<(u32, ClientError)>> {
    let mut failures = Vec::new();
    for m in miners.iter_mut() {
        match upload(bytes, m, ledger) {
            Ok(fid) => return Ok((fid, m.id(), failures)),
            Err(e) => failures.push((m.id(), e)),
        }
    }
    Err(failures)
}

pub fn delete(fid: Fid, miner: &mut SpirMiner, ledger: &mut Ledger) -> Result<(), ClientError> {
    let m = miner.handle_delete(ledger, fid)?;
    m.primary.verdict.map(|_| ()).map_err(ClientError::Rejected)
}

/// Collects replies from replicas until `f + 1` agree.
#[derive(Clone, Debug)]
pub struct ReplyTally {
    need: usize,
    seen: Vec<(RequestOutcome, BTreeSet<u32>)>,
}

impl ReplyTally {
    pub fn new(n: usize) -> Self {
        Self { need: max_faulty(n) + 1, seen: Vec::new() }
    }

    /// Records a reply; returns the outcome once enough replicas agree.
    pub fn add(&mut self, replica: u32, outcome: RequestOutcome) -> Option<RequestOutcome> {
        let slot = match self.seen.iter().position(|(o, _)| *o == outcome) {
            Some(i) => i,
            None => {
                self.seen.push((outcome, BTreeSet::new()));
                self.seen.len() - 1
            }
        };
        self.seen[slot].1.insert(replica);
        (self.seen[slot].1.len() >= self.need).then_some(outcome)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::node::{MinerConfig, Mode, Strategy};
    use crate::smr::{ClientRequest, Output, SmrConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spir_miner(id: u32, strategy: Strategy, params: SpirParams) -> SpirMiner {
        SpirMiner::new(MinerConfig { id, mode: Mode::Spir, strategy, record_len: 48, spir: params, seed: 5 })
    }

    #[test]
    fn spir_round_trip_both_backends() {
        for params in [SpirParams::plain_insecure(), SpirParams::default()] {
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let mut ledger = Ledger::new();
            let mut m = spir_miner(1, Strategy::Honest, params);
            let fids: Vec<Fid> = (0..6u32)
                .map(|i| upload(format!("file number {i}").as_bytes(), &mut m, &mut ledger).unwrap())
                .collect();
            for (i, fid) in fids.iter().enumerate() {
                let r = retrieve_spir(*fid, &ledger, &mut m, &mut rng);
                assert_eq!(r.outcome, Outcome::Recovered);
                assert_eq!(r.bytes.unwrap(), format!("file number {i}").into_bytes());
                assert_eq!(r.pir_rounds, 1);
            }
            delete(fids[2], &mut m, &mut ledger).unwrap();
            assert_eq!(retrieve_spir(fids[2], &ledger, &mut m, &mut rng).outcome, Outcome::Absent);
        }
    }

    #[test]
    fn stale_directory_knowledge_reads_zero_record() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut ledger = Ledger::new();
        let mut m = spir_miner(1, Strategy::Honest, SpirParams::plain_insecure());
        for i in 0..4u32 {
            upload(&i.to_be_bytes(), &mut m, &mut ledger).unwrap();
        }
        let gone = Fid::of(&2u32.to_be_bytes());
        let before = ledger.clone();
        delete(gone, &mut m, &mut ledger).unwrap();
        let (r, q) = spir_start(gone, &before, 48, m.params(), &mut rng).unwrap();
        // The deletion bumped the version; the retained snapshot is the one before.
        let a = m.handle_query(&q).unwrap();
        assert_eq!(spir_finish(r, &a, None).outcome, Outcome::Recovered);
        let (r, mut q) = spir_start(gone, &before, 48, m.params(), &mut rng).unwrap();
        q.db_version = m.store().version();
        let a = m.handle_query(&q).unwrap();
        assert_eq!(spir_finish(r, &a, None).outcome, Outcome::Absent);
    }

    #[test]
    fn corrupt_single_miner_is_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut ledger = Ledger::new();
        let mut m = spir_miner(1, Strategy::CorruptPirAnswer, SpirParams::plain_insecure());
        let fid = upload(b"precious", &mut m, &mut ledger).unwrap();
        for _ in 0..50 {
            let r = retrieve_spir(fid, &ledger, &mut m, &mut rng);
            assert_eq!(r.outcome, Outcome::IntegrityFailure);
            assert!(r.bytes.is_none());
        }
    }

    #[test]
    fn upload_retries_past_a_forging_miner() {
        let mut ledger = Ledger::new();
        let mut miners = vec![
            spir_miner(1, Strategy::WrongVacantIndex, SpirParams::plain_insecure()),
            spir_miner(2, Strategy::Honest, SpirParams::plain_insecure()),
        ];
        let (fid, at, failures) = upload_any(b"retry me", &mut miners, &mut ledger).unwrap();
        assert_eq!(at, 2);
        assert!(matches!(failures.as_slice(), [(1, ClientError::Rejected(_))]));
        assert_eq!(ledger.lookup(&fid).unwrap().miners, vec![2]);
    }

    fn subnet(strategies: &[Strategy]) -> (Vec<MpirMiner>, Ledger) {
        let n = strategies.len();
        let mut ledger = Ledger::new();
        let ids: Vec<u32> = (0..n as u32).map(|i| 100 + i).collect();
        ledger.register_chain(1000, ids.clone());
        let miners = strategies
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let cfg = MinerConfig {
                    id: ids[i],
                    mode: Mode::Mpir,
                    strategy: s,
                    record_len: 48,
                    spir: SpirParams::plain_insecure(),
                    seed: 11,
                };
                MpirMiner::new(&cfg, 1000, i as u32, n, SmrConfig { view_timeout: 50, delay_max: 0, max_batch: 8 })
            })
            .collect();
        (miners, ledger)
    }

    /// Delivers everything immediately, in order, until quiet.
    fn settle(miners: &mut [MpirMiner], ledger: &mut Ledger, reqs: Vec<ClientRequest>) {
        let mut queue: std::collections::VecDeque<(usize, Option<crate::smr::SmrMsg>, Option<ClientRequest>)> =
            std::collections::VecDeque::new();
        for r in reqs {
            for i in 0..miners.len() {
                queue.push_back((i, None, Some(r.clone())));
            }
        }
        while let Some((i, msg, req)) = queue.pop_front() {
            let mut out = Vec::new();
            match (msg, req) {
                (Some(m), _) => miners[i].replica_mut().on_message(m, &mut out),
                (None, Some(r)) => miners[i].handle_request(r, &mut out),
                _ => {}
            }
            for o in out {
                match o {
                    Output::Broadcast(m) => {
                        for j in (0..miners.len()).filter(|&j| j != i) {
                            queue.push_back((j, Some(m.clone()), None));
                        }
                    }
                    Output::Send(j, m) => queue.push_back((j as usize, Some(m), None)),
                    Output::Committed { block, .. } => {
                        for e in block.entries.iter().filter_map(|e| e.proof.clone()) {
                            if ledger.head(1000) == e.prev_hash() {
                                ledger.append(1000, e).unwrap();
                            }
                        }
                    }
                    _ => {}
                }
            }
        }
    }

    #[test]
    fn mpir_recovers_and_names_the_corrupt_miner() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (mut miners, mut ledger) =
            subnet(&[Strategy::Honest, Strategy::Honest, Strategy::CorruptPirAnswer, Strategy::Honest]);
        let files: Vec<Vec<u8>> = (0..5).map(|i| format!("replicated {i}").into_bytes()).collect();
        let reqs = files.iter().enumerate().map(|(i, f)| ClientRequest::upload(1, i as u64, f.clone())).collect();
        settle(&mut miners, &mut ledger, reqs);
        assert_eq!(ledger.height(1000), 5);
        for f in &files {
            let r = retrieve_mpir(Fid::of(f), &ledger, &mut miners, &mut rng);
            assert_eq!(r.outcome, Outcome::RobustRecovered { faulty: BTreeSet::from([102]) });
            assert_eq!(r.bytes.as_deref(), Some(f.as_slice()));
            assert_eq!(r.pir_rounds, 1);
        }
    }

    #[test]
    fn mpir_two_corrupt_is_unrecoverable() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (mut miners, mut ledger) =
            subnet(&[Strategy::CorruptPirAnswer, Strategy::Honest, Strategy::CorruptPirAnswer, Strategy::Honest]);
        settle(&mut miners, &mut ledger, vec![ClientRequest::upload(1, 0, b"x".to_vec())]);
        for _ in 0..10 {
            let r = retrieve_mpir(Fid::of(b"x"), &ledger, &mut miners, &mut rng);
            assert!(matches!(r.outcome, Outcome::Unrecoverable { .. }), "{:?}", r.outcome);
            assert!(r.bytes.is_none());
        }
    }

    #[test]
    fn reply_tally_needs_f_plus_one() {
        let mut t = ReplyTally::new(4);
        assert_eq!(t.add(0, RequestOutcome::Rejected), None);
        assert_eq!(t.add(0, RequestOutcome::Rejected), None);
        assert_eq!(t.add(1, RequestOutcome::Rejected), Some(RequestOutcome::Rejected));
    }
}
