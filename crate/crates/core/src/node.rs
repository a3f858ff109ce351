//! Storage miners.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aca::Fid;
use crate::attacks::{self, Attack};
use crate::hash::Digest;
use crate::ledger::{ChainId, Ledger, LedgerError};
use crate::pir_multi::{corrupt, m_answer, Corruption, MultiAnswer, MultiQuery};
use crate::pir_single::{s_answer, Hint, PirError, SingleAnswer, SingleQuery, SpirParams};
use crate::proofs::{RejectReason, StateProof};
use crate::smr::{ClientRequest, Output, Replica, SmrConfig};
use crate::store::{Checkpoint, MinerStore, Refusal, StoreError};

/// How a miner behaves. Everything but `Honest` is a fault-injection hook.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    #[default]
    Honest,
    ConflictIndex,
    WrongVacantIndex,
    DeleteWrongFid,
    FakeDelete,
    MutateIndex,
    CorruptPirAnswer,
    SilentLeader,
}

impl Strategy {
    pub const ALL: [Strategy; 8] = [
        Strategy::Honest,
        Strategy::ConflictIndex,
        Strategy::WrongVacantIndex,
        Strategy::DeleteWrongFid,
        Strategy::FakeDelete,
        Strategy::MutateIndex,
        Strategy::CorruptPirAnswer,
        Strategy::SilentLeader,
    ];

    /// The index-manipulation attack this strategy mounts, if any.
    pub fn attack(self) -> Option<Attack> {
        match self {
            Strategy::ConflictIndex => Some(Attack::ConflictIndex),
            Strategy::WrongVacantIndex => Some(Attack::WrongVacantIndex),
            Strategy::DeleteWrongFid => Some(Attack::DeleteWrongFid),
            Strategy::FakeDelete => Some(Attack::FakeDelete),
            Strategy::MutateIndex => Some(Attack::MutateIndex),
            _ => None,
        }
    }

    pub fn is_byzantine(self) -> bool {
        self != Strategy::Honest
    }

    pub fn label(self) -> &'static str {
        match self {
            Strategy::Honest => "honest",
            Strategy::ConflictIndex => "conflict-index",
            Strategy::WrongVacantIndex => "wrong-vacant-index",
            Strategy::DeleteWrongFid => "delete-wrong-fid",
            Strategy::FakeDelete => "fake-delete",
            Strategy::MutateIndex => "mutate-index",
            Strategy::CorruptPirAnswer => "corrupt-pir-answer",
            Strategy::SilentLeader => "silent-leader",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Spir,
    Mpir,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MinerConfig {
    pub id: u32,
    pub mode: Mode,
    pub strategy: Strategy,
    pub record_len: usize,
    pub spir: SpirParams,
    pub seed: u64,
}

/// The ledger's verdict on one published proof.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Receipt {
    pub proof: StateProof,
    pub verdict: Result<Digest, RejectReason>,
    /// Set when the proof was forged on purpose.
    pub attack: Option<Attack>,
}

/// What a SPIR miner did with a mutation request.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mutation {
    /// The proof published for the request itself.
    pub primary: Receipt,
    /// An unrequested proof published alongside it.
    pub side: Option<Receipt>,
}

impl Mutation {
    pub fn accepted(&self) -> bool {
        self.primary.verdict.is_ok()
    }

    pub fn receipts(&self) -> impl Iterator<Item = &Receipt> {
        std::iter::once(&self.primary).chain(self.side.as_ref())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum QueryError {
    /// Built for a database this miner no longer holds.
    #[error("stale query; database now has {} records at version {}", .0.db_size, .0.version)]
    Stale(Refusal),
    #[error("malformed query: {0}")]
    Malformed(String),
}

fn verdict(r: Result<Digest, LedgerError>) -> Result<Digest, RejectReason> {
    r.map_err(|e| match e {
        LedgerError::Rejected(r) => r,
        other => panic!("ledger append: {other}"),
    })
}

/// A miner that owns its accumulator and publishes proofs straight to the
/// ledger, on the chain with its own id.
#[derive(Clone, Debug)]
pub struct SpirMiner {
    cfg: MinerConfig,
    store: MinerStore,
    rng: ChaCha8Rng,
}

impl SpirMiner {
    pub fn new(cfg: MinerConfig) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ u64::from(cfg.id).rotate_left(17));
        Self { store: MinerStore::new(cfg.record_len), cfg, rng }
    }

    pub fn id(&self) -> u32 {
        self.cfg.id
    }

    pub fn chain(&self) -> ChainId {
        self.cfg.id
    }

    pub fn strategy(&self) -> Strategy {
        self.cfg.strategy
    }

    pub fn store(&self) -> &MinerStore {
        &self.store
    }

    pub fn params(&self) -> &SpirParams {
        &self.cfg.spir
    }

    pub fn checkpoint(&self) -> Checkpoint {
        self.store.checkpoint()
    }

    fn publish(
        &mut self,
        ledger: &mut Ledger,
        proof: StateProof,
        attack: Option<Attack>,
        bytes: Option<&[u8]>,
    ) -> Receipt {
        let verdict = verdict(ledger.append(self.chain(), proof.clone()));
        if verdict.is_ok() && attack.is_some() {
            // Keep the local state in step with whatever the ledger took.
            self.store.apply(&proof, bytes).expect("ledger accepted the proof");
        }
        Receipt { proof, verdict, attack }
    }

    fn honest_upload(&mut self, ledger: &mut Ledger, fid: Fid, bytes: &[u8]) -> Result<Receipt, StoreError> {
        let proof = self.store.upload(fid, bytes, ledger.head(self.chain()))?;
        Ok(self.publish(ledger, proof, None, None))
    }

    /// Stores `bytes` under `fid` and publishes the upload proof.
    pub fn handle_upload(&mut self, ledger: &mut Ledger, fid: Fid, bytes: &[u8]) -> Result<Mutation, StoreError> {
        self.store.admit(&fid, bytes)?;
        let head = ledger.head(self.chain());
        match self.cfg.strategy.attack() {
            Some(a) if a.is_upload() => {
                if let Some(p) = attacks::forge(a, self.store.aca(), fid, head, &mut self.rng) {
                    let primary = self.publish(ledger, p, Some(a), Some(bytes));
                    return Ok(Mutation { primary, side: None });
                }
                Ok(Mutation { primary: self.honest_upload(ledger, fid, bytes)?, side: None })
            }
            Some(Attack::MutateIndex) => {
                let primary = self.honest_upload(ledger, fid, bytes)?;
                let side = self.mutate(ledger);
                Ok(Mutation { primary, side })
            }
            _ => Ok(Mutation { primary: self.honest_upload(ledger, fid, bytes)?, side: None }),
        }
    }

    /// Removes `fid` and publishes the deletion proof.
    pub fn handle_delete(&mut self, ledger: &mut Ledger, fid: Fid) -> Result<Mutation, StoreError> {
        if !self.store.aca().contains(&fid) {
            return Err(StoreError::Absent);
        }
        let head = ledger.head(self.chain());
        match self.cfg.strategy.attack() {
            Some(a) if a.is_deletion() => {
                if let Some(p) = attacks::forge(a, self.store.aca(), fid, head, &mut self.rng) {
                    let primary = self.publish(ledger, p, Some(a), None);
                    return Ok(Mutation { primary, side: None });
                }
            }
            Some(Attack::MutateIndex) => {
                let proof = self.store.delete(&fid, head)?;
                let primary = self.publish(ledger, proof, None, None);
                let side = self.mutate(ledger);
                return Ok(Mutation { primary, side });
            }
            _ => {}
        }
        let proof = self.store.delete(&fid, head)?;
        Ok(Mutation { primary: self.publish(ledger, proof, None, None), side: None })
    }

    fn mutate(&mut self, ledger: &mut Ledger) -> Option<Receipt> {
        let p = attacks::mutate_index(self.store.aca(), ledger.head(self.chain()), &mut self.rng)?;
        let bytes = self.store.file(&p.fid()).map(<[u8]>::to_vec);
        Some(self.publish(ledger, p, Some(Attack::MutateIndex), bytes.as_deref()))
    }

    /// Answers against the snapshot the query names.
    pub fn handle_query(&mut self, q: &SingleQuery) -> Result<SingleAnswer, QueryError> {
        let db = self.store.snapshot(q.db_size, q.db_version).map_err(QueryError::Stale)?;
        let mut a = s_answer(&db, q).map_err(|e: PirError| QueryError::Malformed(e.to_string()))?;
        if self.cfg.strategy == Strategy::CorruptPirAnswer {
            a.tamper(&mut self.rng);
        }
        Ok(a)
    }

    pub fn hint(&self) -> Arc<Hint> {
        self.store.hint(&self.cfg.spir)
    }
}

/// Outcome of a multi-server query at one replica.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MultiResponse {
    Answer(MultiAnswer),
    Refused(Refusal),
    /// Held until this replica reaches the version the query names.
    Deferred,
    Malformed(String),
}

/// A miner in a replicated subnet.
#[derive(Clone, Debug)]
pub struct MpirMiner {
    global_id: u32,
    replica: Replica,
    rng: ChaCha8Rng,
    deferred: BTreeMap<u64, Vec<(u32, MultiQuery)>>,
}

impl MpirMiner {
    /// `position` is the replica's index within the subnet of size `n`.
    pub fn new(cfg: &MinerConfig, chain: ChainId, position: u32, n: usize, smr: SmrConfig) -> Self {
        let replica = Replica::new(position, n, chain, cfg.record_len, smr, cfg.strategy, cfg.seed);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ u64::from(cfg.id).rotate_left(29));
        Self { global_id: cfg.id, replica, rng, deferred: BTreeMap::new() }
    }

    pub fn id(&self) -> u32 {
        self.global_id
    }

    pub fn replica(&self) -> &Replica {
        &self.replica
    }

    pub fn replica_mut(&mut self) -> &mut Replica {
        &mut self.replica
    }

    pub fn store(&self) -> &MinerStore {
        self.replica.store()
    }

    /// Uploads and deletions enter the replica's pending queue.
    pub fn handle_request(&mut self, req: ClientRequest, out: &mut Vec<Output>) {
        self.replica.on_request(req, out);
    }

    fn answer(&mut self, q: &MultiQuery) -> MultiResponse {
        let store = self.replica.store();
        let db = match store.snapshot(q.header.db_size, q.header.db_version) {
            Ok(db) => db,
            Err(r) => return MultiResponse::Refused(r),
        };
        match m_answer(&db, q) {
            Ok(mut a) => {
                if self.replica.strategy() == Strategy::CorruptPirAnswer {
                    let how = *Corruption::ALL.choose(&mut self.rng).expect("nonempty");
                    corrupt(&mut a, q, how, &mut self.rng);
                }
                MultiResponse::Answer(a)
            }
            Err(e) => MultiResponse::Malformed(e.to_string()),
        }
    }

    /// Answers now, or defers a query for a version this replica has not
    /// reached yet. `client` is echoed back by [`Self::drain_ready`].
    pub fn handle_multi_query(&mut self, client: u32, q: MultiQuery) -> MultiResponse {
        if q.header.db_version > self.store().version() {
            self.deferred.entry(q.header.db_version).or_default().push((client, q));
            return MultiResponse::Deferred;
        }
        self.answer(&q)
    }

    /// Answers deferred queries whose version has been reached.
    pub fn drain_ready(&mut self) -> Vec<(u32, MultiResponse)> {
        let v = self.store().version();
        let later = self.deferred.split_off(&(v + 1));
        let ready = std::mem::replace(&mut self.deferred, later);
        let mut out = Vec::new();
        for (_, qs) in ready {
            for (client, q) in qs {
                let r = self.answer(&q);
                out.push((client, r));
            }
        }
        out
    }
}
