//! In-process bulletin board: an append-only log of verified proofs, one hash
//! chain per miner (or per replicated subnet), plus the FID directory clients
//! use to learn indexes and database sizes.
//!
//! The directory is not stored separately. Each chain's accumulator is rebuilt
//! by replaying its accepted proofs, and lookups read indexes off it.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::aca::{AcaState, Fid, RootVector};
use crate::codec::{DecodeError, Reader, Writer};
use crate::hash::Digest;
use crate::proofs::{genesis_digest, verify_proof, ChainView, RejectReason, StateProof, VerifyOutcome};

pub type ChainId = u32;

const FILE_MAGIC: &[u8; 8] = b"PDSNLOG1";

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("proof rejected: {0}")]
    Rejected(#[from] RejectReason),
    #[error("no entry with hash {0}")]
    NotFound(Digest),
    #[error("ledger file: {0}")]
    Io(#[from] io::Error),
    #[error("ledger file: {0}")]
    Decode(#[from] DecodeError),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LedgerEntry {
    pub entry_hash: Digest,
    pub chain: ChainId,
    /// 1 for a chain's first proof.
    pub height: u64,
    pub payload: StateProof,
}

/// What a client learns about a FID.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lookup {
    pub chain: ChainId,
    pub index: u64,
    pub db_size: u64,
    pub miners: Vec<u32>,
}

#[derive(Clone, Debug)]
struct Chain {
    head: Digest,
    height: u64,
    state: AcaState,
    members: BTreeSet<u32>,
}

impl Chain {
    fn new(id: ChainId, members: BTreeSet<u32>) -> Self {
        Self { head: genesis_digest(id), height: 0, state: AcaState::new(), members }
    }
}

struct HeadView<'a>(&'a Chain);

impl ChainView for HeadView<'_> {
    fn prior_roots(&self, prev_hash: &Digest) -> Option<RootVector> {
        (*prev_hash == self.0.head).then(|| self.0.state.roots())
    }
}

/// Applies an accepted proof to the accumulator it was verified against.
///
/// Uploads are replayed at the proven leaf rather than re-run through the
/// insertion rule, so the replay matches the publisher's state exactly.
pub fn apply_proof(state: &mut AcaState, proof: &StateProof) -> VerifyOutcome {
    let applied = match proof {
        StateProof::Upload(p) if p.roots.len() > state.width() => state.grow_with(p.fid),
        StateProof::Upload(p) => state.set_leaf(p.tree_index, p.witness.leaf_position, Some(p.fid)),
        StateProof::Deletion(p) => state.delete(&p.fid).map(|_| ()),
    };
    if applied.is_err() || state.roots() != *proof.roots() {
        return Err(RejectReason::StateTransitionInvalid);
    }
    Ok(())
}

#[derive(Clone, Debug, Default)]
pub struct Ledger {
    entries: Vec<LedgerEntry>,
    by_hash: HashMap<Digest, usize>,
    chains: BTreeMap<ChainId, Chain>,
    holders: BTreeMap<Fid, BTreeSet<ChainId>>,
}

impl Ledger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Declares which miners serve `chain`. Chains not registered are served
    /// by the miner with the same id.
    pub fn register_chain(&mut self, chain: ChainId, members: impl IntoIterator<Item = u32>) {
        let members: BTreeSet<u32> = members.into_iter().collect();
        self.chains.entry(chain).or_insert_with(|| Chain::new(chain, BTreeSet::new())).members = members;
    }

    fn chain(&self, id: ChainId) -> Option<&Chain> {
        self.chains.get(&id)
    }

    /// Runs the checks `append` would run, without storing anything.
    pub fn check(&self, chain: ChainId, proof: &StateProof) -> VerifyOutcome {
        let fresh;
        let c = match self.chain(chain) {
            Some(c) => c,
            None => {
                fresh = Chain::new(chain, BTreeSet::new());
                &fresh
            }
        };
        verify_proof(proof, &HeadView(c))?;
        // A FID maps to at most one leaf per chain.
        if let StateProof::Upload(p) = proof {
            if c.state.contains(&p.fid) {
                return Err(RejectReason::IndexConflict);
            }
        }
        apply_proof(&mut c.state.clone(), proof)
    }

    /// Verifies `proof` against the head of `chain` and stores it.
    pub fn append(&mut self, chain: ChainId, proof: StateProof) -> Result<Digest, LedgerError> {
        self.check(chain, &proof)?;
        let c = self.chains.entry(chain).or_insert_with(|| Chain::new(chain, BTreeSet::from([chain])));
        apply_proof(&mut c.state, &proof).expect("checked above");
        let entry_hash = proof.digest();
        c.head = entry_hash;
        c.height += 1;
        let fid = proof.fid();
        match &proof {
            StateProof::Upload(_) => {
                self.holders.entry(fid).or_default().insert(chain);
            }
            StateProof::Deletion(_) => {
                if let Some(set) = self.holders.get_mut(&fid) {
                    set.remove(&chain);
                    if set.is_empty() {
                        self.holders.remove(&fid);
                    }
                }
            }
        }
        self.by_hash.insert(entry_hash, self.entries.len());
        self.entries.push(LedgerEntry { entry_hash, chain, height: c.height, payload: proof });
        Ok(entry_hash)
    }

    pub fn get(&self, entry_hash: &Digest) -> Result<&LedgerEntry, LedgerError> {
        self.by_hash.get(entry_hash).map(|&i| &self.entries[i]).ok_or(LedgerError::NotFound(*entry_hash))
    }

    /// Digest the next proof of `chain` must cite.
    pub fn head(&self, chain: ChainId) -> Digest {
        self.chain(chain).map_or_else(|| genesis_digest(chain), |c| c.head)
    }

    pub fn height(&self, chain: ChainId) -> u64 {
        self.chain(chain).map_or(0, |c| c.height)
    }

    pub fn head_roots(&self, chain: ChainId) -> RootVector {
        self.chain(chain).map_or_else(RootVector::genesis, |c| c.state.roots())
    }

    pub fn db_size(&self, chain: ChainId) -> u64 {
        self.head_roots(chain).capacity()
    }

    /// The accumulator obtained by replaying every accepted proof of `chain`.
    pub fn replay_state(&self, chain: ChainId) -> AcaState {
        self.chain(chain).map_or_else(AcaState::new, |c| c.state.clone())
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn chain_entries(&self, chain: ChainId) -> impl Iterator<Item = &LedgerEntry> {
        self.entries.iter().filter(move |e| e.chain == chain)
    }

    pub fn chain_ids(&self) -> Vec<ChainId> {
        self.chains.keys().copied().collect()
    }

    pub fn members(&self, chain: ChainId) -> Vec<u32> {
        self.chain(chain).map_or_else(|| vec![chain], |c| c.members.iter().copied().collect())
    }

    /// The live mapping of `fid` on `chain`.
    pub fn lookup_in(&self, chain: ChainId, fid: &Fid) -> Option<Lookup> {
        let c = self.chain(chain)?;
        let index = c.state.index_of(fid)?;
        Some(Lookup { chain, index, db_size: c.state.capacity(), miners: c.members.iter().copied().collect() })
    }

    /// The live mapping of `fid` on the lowest-numbered chain holding it.
    pub fn lookup(&self, fid: &Fid) -> Option<Lookup> {
        let chain = *self.holders.get(fid)?.first()?;
        self.lookup_in(chain, fid)
    }

    /// Every chain currently holding `fid`.
    pub fn holders(&self, fid: &Fid) -> Vec<ChainId> {
        self.holders.get(fid).map(|s| s.iter().copied().collect()).unwrap_or_default()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        for b in FILE_MAGIC {
            w.u8(*b);
        }
        w.len_prefix(self.chains.len());
        for (id, c) in &self.chains {
            w.u32(*id).len_prefix(c.members.len());
            for m in &c.members {
                w.u32(*m);
            }
        }
        w.len_prefix(self.entries.len());
        for e in &self.entries {
            let mut inner = Writer::new();
            inner.u32(e.chain);
            e.payload.encode_into(&mut inner);
            w.bytes(&inner.finish());
        }
        w.finish()
    }

    /// Rebuilds a ledger from its encoding, re-verifying every entry.
    pub fn decode(buf: &[u8]) -> Result<Self, LedgerError> {
        let mut r = Reader::new(buf);
        for b in FILE_MAGIC {
            if r.u8()? != *b {
                return Err(DecodeError::Invalid("ledger magic").into());
            }
        }
        let mut ledger = Ledger::new();
        for _ in 0..r.len_prefix(8)? {
            let id = r.u32()?;
            let n = r.len_prefix(4)?;
            let members = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
            ledger.register_chain(id, members);
        }
        for _ in 0..r.len_prefix(4)? {
            let mut inner = Reader::new(r.bytes()?);
            let chain = inner.u32()?;
            let proof = StateProof::decode_from(&mut inner)?;
            inner.finish()?;
            ledger.append(chain, proof)?;
        }
        r.finish()?;
        Ok(ledger)
    }

    pub fn save(&self, path: &Path) -> Result<(), LedgerError> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, LedgerError> {
        Self::decode(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hash;
    use crate::proofs::{make_deletion_proof, make_upload_proof};

    fn fid(n: u32) -> Fid {
        Fid::of(&n.to_be_bytes())
    }

    fn upload(l: &mut Ledger, s: &mut AcaState, chain: ChainId, f: Fid) -> Digest {
        let p = make_upload_proof(s, f, l.head(chain)).unwrap();
        l.append(chain, StateProof::Upload(p)).unwrap()
    }

    #[test]
    fn worked_example_lookup() {
        let mut l = Ledger::new();
        let mut s = AcaState::new();
        for i in 1..=6 {
            upload(&mut l, &mut s, 3, fid(i));
        }
        let got = l.lookup(&fid(6)).unwrap();
        assert_eq!((got.index, got.db_size, got.miners), (6, 7, vec![3]));
    }

    #[test]
    fn head_is_hash_of_last_proof() {
        let mut l = Ledger::new();
        let mut s = AcaState::new();
        assert_eq!(l.head(0), genesis_digest(0));
        for i in 0..5 {
            let p = make_upload_proof(&mut s, fid(i), l.head(0)).unwrap();
            let expect = hash::hash_bytes(&StateProof::Upload(p.clone()).encode());
            l.append(0, StateProof::Upload(p)).unwrap();
            assert_eq!(l.head(0), expect);
            assert_eq!(l.height(0), u64::from(i) + 1);
        }
    }

    #[test]
    fn deletion_removes_directory_entry() {
        let mut l = Ledger::new();
        let mut s = AcaState::new();
        upload(&mut l, &mut s, 0, fid(1));
        upload(&mut l, &mut s, 0, fid(2));
        let d = make_deletion_proof(&mut s, &fid(1), l.head(0)).unwrap();
        l.append(0, StateProof::Deletion(d)).unwrap();
        assert!(l.lookup(&fid(1)).is_none());
        assert_eq!(l.lookup(&fid(2)).unwrap().index, 2);
    }

    #[test]
    fn rejected_proof_is_not_stored() {
        let mut l = Ledger::new();
        let mut s = AcaState::new();
        upload(&mut l, &mut s, 0, fid(1));
        let mut p = make_upload_proof(&mut s.clone(), fid(2), l.head(0)).unwrap();
        p.index = 1;
        let before = l.head(0);
        assert!(matches!(l.append(0, StateProof::Upload(p)), Err(LedgerError::Rejected(RejectReason::IndexMismatch))));
        assert_eq!(l.head(0), before);
        assert_eq!(l.entries().len(), 1);
    }

    #[test]
    fn stale_prev_hash_breaks_chain() {
        let mut l = Ledger::new();
        let mut s = AcaState::new();
        let genesis = l.head(0);
        upload(&mut l, &mut s, 0, fid(1));
        let p = make_upload_proof(&mut s, fid(2), genesis).unwrap();
        assert!(matches!(l.append(0, StateProof::Upload(p)), Err(LedgerError::Rejected(RejectReason::ChainBroken))));
    }

    #[test]
    fn replay_matches_state_and_file_round_trips() {
        let mut l = Ledger::new();
        l.register_chain(9, [1, 2, 3, 4]);
        let mut s = AcaState::new();
        for i in 0..40 {
            upload(&mut l, &mut s, 9, fid(i));
            if i % 3 == 0 {
                let d = make_deletion_proof(&mut s, &fid(i / 2), l.head(9)).unwrap();
                l.append(9, StateProof::Deletion(d)).unwrap();
            }
        }
        assert_eq!(l.replay_state(9), s);
        let back = Ledger::decode(&l.encode()).unwrap();
        assert_eq!(back.replay_state(9), s);
        assert_eq!(back.head(9), l.head(9));
        assert_eq!(back.members(9), vec![1, 2, 3, 4]);
    }

    #[test]
    fn bit_flip_in_stored_proof_breaks_replay() {
        let mut l = Ledger::new();
        let mut s = AcaState::new();
        for i in 0..8 {
            upload(&mut l, &mut s, 0, fid(i));
        }
        let buf = l.encode();
        // Flip one bit inside every entry in turn.
        let mut failures = 0;
        let header = FILE_MAGIC.len() + 4 + 4 + 4 + 4;
        for pos in (header..buf.len()).step_by(37) {
            let mut bad = buf.clone();
            bad[pos] ^= 1;
            if Ledger::decode(&bad).is_err() {
                failures += 1;
            }
        }
        assert_eq!(failures, (header..buf.len()).step_by(37).count());
    }

    #[test]
    fn lookup_picks_lowest_chain() {
        let mut l = Ledger::new();
        let (mut a, mut b) = (AcaState::new(), AcaState::new());
        upload(&mut l, &mut b, 5, fid(0));
        upload(&mut l, &mut b, 5, fid(1));
        upload(&mut l, &mut a, 2, fid(1));
        assert_eq!(l.lookup(&fid(1)).unwrap().chain, 2);
        assert_eq!(l.holders(&fid(1)), vec![2, 5]);
    }
}
