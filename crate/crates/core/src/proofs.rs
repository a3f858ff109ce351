//! Upload and deletion proofs, hash-chained per miner, and their public
//! verification.
//!
//! A verifier sees only the proof and the root vector of the miner's previous
//! proof, so every check runs in time logarithmic in the number of stored files.

use thiserror::Error;

use crate::aca::{compute_index, verify_membership, AcaError, AcaState, Fid, RootVector, Side, Witness};
use crate::codec::{DecodeError, Reader, Writer};
use crate::hash::{self, Digest};

/// `π^u`: the post-insertion root vector, the tree and path of the new leaf,
/// the FID, its claimed index and the digest of the previous proof.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UploadProof {
    pub roots: RootVector,
    pub tree_index: usize,
    pub witness: Witness,
    pub fid: Fid,
    pub index: u64,
    pub prev_hash: Digest,
}

/// `π^d`: the post-deletion root vector and the pre-deletion path of the
/// removed leaf. The witness is always present, even when the tree empties.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DeletionProof {
    pub roots: RootVector,
    pub tree_index: usize,
    pub witness: Witness,
    pub fid: Fid,
    pub leaf_position: u64,
    pub prev_hash: Digest,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StateProof {
    Upload(UploadProof),
    Deletion(DeletionProof),
}

const TAG_UPLOAD: u8 = 1;
const TAG_DELETION: u8 = 2;

impl StateProof {
    pub fn fid(&self) -> Fid {
        match self {
            StateProof::Upload(p) => p.fid,
            StateProof::Deletion(p) => p.fid,
        }
    }

    pub fn roots(&self) -> &RootVector {
        match self {
            StateProof::Upload(p) => &p.roots,
            StateProof::Deletion(p) => &p.roots,
        }
    }

    pub fn prev_hash(&self) -> Digest {
        match self {
            StateProof::Upload(p) => p.prev_hash,
            StateProof::Deletion(p) => p.prev_hash,
        }
    }

    pub fn is_upload(&self) -> bool {
        matches!(self, StateProof::Upload(_))
    }

    pub fn encode_into(&self, w: &mut Writer) {
        match self {
            StateProof::Upload(p) => {
                w.u8(TAG_UPLOAD);
                p.roots.encode(w);
                w.u32(p.tree_index as u32);
                p.witness.encode(w);
                w.digest(&Digest(p.fid.0)).u64(p.index).digest(&p.prev_hash);
            }
            StateProof::Deletion(p) => {
                w.u8(TAG_DELETION);
                p.roots.encode(w);
                w.u32(p.tree_index as u32);
                p.witness.encode(w);
                w.digest(&Digest(p.fid.0)).u64(p.leaf_position).digest(&p.prev_hash);
            }
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.encode_into(&mut w);
        w.finish()
    }

    pub fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let tag = r.u8()?;
        let roots = RootVector::decode(r)?;
        let tree_index = r.u32()? as usize;
        let witness = Witness::decode(r)?;
        let fid = Fid(r.digest()?.0);
        let n = r.u64()?;
        let prev_hash = r.digest()?;
        match tag {
            TAG_UPLOAD => Ok(StateProof::Upload(UploadProof { roots, tree_index, witness, fid, index: n, prev_hash })),
            TAG_DELETION => {
                Ok(StateProof::Deletion(DeletionProof { roots, tree_index, witness, fid, leaf_position: n, prev_hash }))
            }
            t => Err(DecodeError::BadTag(t)),
        }
    }

    pub fn decode(buf: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(buf);
        let p = Self::decode_from(&mut r)?;
        r.finish()?;
        Ok(p)
    }

    /// Digest the next proof in the chain cites as its `prev_hash`.
    pub fn digest(&self) -> Digest {
        hash::hash_bytes(&self.encode())
    }
}

/// Why a proof was rejected.
#[derive(Debug, Error, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RejectReason {
    #[error("fid is not a member of the claimed tree")]
    FidAbsent,
    #[error("claimed index does not match the witness")]
    IndexMismatch,
    #[error("target leaf was not vacant in the previous state")]
    IndexConflict,
    #[error("invalid state transition")]
    StateTransitionInvalid,
    #[error("previous-proof hash does not resolve to the chain head")]
    ChainBroken,
    #[error("trees other than the target changed")]
    TamperedOtherTrees,
    #[error("deletion was not carried out")]
    DeletionNotExecuted,
}

/// `Ok(())` when accepted, otherwise the first failing check.
pub type VerifyOutcome = Result<(), RejectReason>;

/// Read access to a miner's proof chain.
pub trait ChainView {
    /// Root vector recorded by the proof with digest `prev_hash`, provided that
    /// proof is the current head of its chain.
    fn prior_roots(&self, prev_hash: &Digest) -> Option<RootVector>;
}

/// Chain anchor for miner `chain_id`.
pub fn genesis_digest(chain_id: u32) -> Digest {
    hash::hash_parts(&[b"PIR-DSN-GENESIS", &chain_id.to_be_bytes()])
}

/// Inserts `fid` into `state` and emits the matching upload proof.
pub fn make_upload_proof(state: &mut AcaState, fid: Fid, head: Digest) -> Result<UploadProof, AcaError> {
    let a = state.insert(fid)?;
    Ok(UploadProof {
        roots: state.roots(),
        tree_index: a.tree_index,
        witness: a.witness,
        fid,
        index: a.index,
        prev_hash: head,
    })
}

/// Removes `fid` from `state` and emits the matching deletion proof.
pub fn make_deletion_proof(state: &mut AcaState, fid: &Fid, head: Digest) -> Result<DeletionProof, AcaError> {
    let d = state.delete(fid)?;
    Ok(DeletionProof {
        roots: state.roots(),
        tree_index: d.tree_index,
        leaf_position: d.witness.leaf_position,
        witness: d.witness,
        fid: *fid,
        prev_hash: head,
    })
}

fn siblings_all_vacant(w: &Witness) -> bool {
    w.path.iter().enumerate().all(|(j, n)| n.sibling == hash::vacant_subtree(j))
}

fn others_unchanged(v: &RootVector, prior: &RootVector, k: usize) -> bool {
    v.len() == prior.len() && v.0.iter().zip(&prior.0).enumerate().all(|(i, (a, b))| i == k || a == b)
}

/// Checks an upload proof against the root vector of the previous proof.
pub fn verify_upload_against(proof: &UploadProof, prior: &RootVector) -> VerifyOutcome {
    let v = &proof.roots;
    let k = proof.tree_index;
    let w = &proof.witness;
    if w.tree_index != k || !w.is_well_formed() {
        return Err(RejectReason::FidAbsent);
    }
    // FID existence.
    if !verify_membership(v, k, w, &proof.fid) {
        return Err(RejectReason::FidAbsent);
    }
    // Correct index position.
    if compute_index(v, k, w) != Ok(proof.index) {
        return Err(RejectReason::IndexMismatch);
    }
    // Conflict-free index: a valid transition from the prior vector.
    if v.len() == prior.len() {
        if !others_unchanged(v, prior, k) {
            return Err(RejectReason::TamperedOtherTrees);
        }
        let was_vacant = match prior.0[k] {
            None => siblings_all_vacant(w),
            Some(r) => w.fold(hash::vacant_leaf()) == r,
        };
        if !was_vacant {
            return Err(RejectReason::IndexConflict);
        }
        Ok(())
    } else if v.len() == prior.len() + 1 && k == prior.len() {
        if v.0[..k].iter().any(Option::is_some) {
            return Err(RejectReason::TamperedOtherTrees);
        }
        // The rightmost leaf's siblings are exactly the merged trees' roots.
        let merged = w.path.iter().zip(&prior.0).all(|(n, r)| n.side == Side::Left && Some(n.sibling) == *r);
        if !merged {
            return Err(RejectReason::StateTransitionInvalid);
        }
        Ok(())
    } else {
        Err(RejectReason::StateTransitionInvalid)
    }
}

/// Checks a deletion proof against the root vector of the previous proof.
pub fn verify_deletion_against(proof: &DeletionProof, prior: &RootVector) -> VerifyOutcome {
    let v = &proof.roots;
    let k = proof.tree_index;
    let w = &proof.witness;
    if w.tree_index != k
        || !w.is_well_formed()
        || w.leaf_position != proof.leaf_position
        || v.len() != prior.len()
        || k >= v.len()
    {
        return Err(RejectReason::StateTransitionInvalid);
    }
    // FID integrity in the previous state.
    if !verify_membership(prior, k, w, &proof.fid) {
        return Err(RejectReason::FidAbsent);
    }
    if !others_unchanged(v, prior, k) {
        return Err(RejectReason::TamperedOtherTrees);
    }
    // Correct execution of the deletion.
    match v.0[k] {
        Some(r) => {
            if w.fold(hash::vacant_leaf()) != r {
                return Err(RejectReason::DeletionNotExecuted);
            }
        }
        None => {
            // An emptied tree is only valid if the FID was its sole occupant.
            if !siblings_all_vacant(w) {
                return Err(RejectReason::TamperedOtherTrees);
            }
        }
    }
    Ok(())
}

pub fn verify_upload_proof(proof: &UploadProof, chain: &impl ChainView) -> VerifyOutcome {
    let prior = chain.prior_roots(&proof.prev_hash).ok_or(RejectReason::ChainBroken)?;
    verify_upload_against(proof, &prior)
}

pub fn verify_deletion_proof(proof: &DeletionProof, chain: &impl ChainView) -> VerifyOutcome {
    let prior = chain.prior_roots(&proof.prev_hash).ok_or(RejectReason::ChainBroken)?;
    verify_deletion_against(proof, &prior)
}

pub fn verify_proof(proof: &StateProof, chain: &impl ChainView) -> VerifyOutcome {
    match proof {
        StateProof::Upload(p) => verify_upload_proof(p, chain),
        StateProof::Deletion(p) => verify_deletion_proof(p, chain),
    }
}

/// A standalone chain of proofs for one miner, used where no ledger is
/// involved (block validation, tests). It sees root vectors only, so an upload
/// of a FID that is already live on another leaf passes here; the ledger,
/// which replays the accumulator, rejects it.
#[derive(Clone, Debug)]
pub struct ProofChain {
    head: Digest,
    head_roots: RootVector,
}

impl ProofChain {
    pub fn new(chain_id: u32) -> Self {
        Self { head: genesis_digest(chain_id), head_roots: RootVector::genesis() }
    }

    pub fn resume(head: Digest, head_roots: RootVector) -> Self {
        Self { head, head_roots }
    }

    pub fn head(&self) -> Digest {
        self.head
    }

    pub fn head_roots(&self) -> &RootVector {
        &self.head_roots
    }

    /// Verifies `proof` against the head and advances on success.
    pub fn extend(&mut self, proof: &StateProof) -> VerifyOutcome {
        verify_proof(proof, self)?;
        self.head = proof.digest();
        self.head_roots = proof.roots().clone();
        Ok(())
    }
}

impl ChainView for ProofChain {
    fn prior_roots(&self, prev_hash: &Digest) -> Option<RootVector> {
        (*prev_hash == self.head).then(|| self.head_roots.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aca::PathNode;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fid(n: u32) -> Fid {
        Fid::of(&n.to_be_bytes())
    }

    fn upload(state: &mut AcaState, chain: &mut ProofChain, f: Fid) -> UploadProof {
        let p = make_upload_proof(state, f, chain.head()).unwrap();
        chain.extend(&StateProof::Upload(p.clone())).unwrap();
        p
    }

    fn six(state: &mut AcaState, chain: &mut ProofChain) -> Vec<UploadProof> {
        (1..=6).map(|i| upload(state, chain, fid(i))).collect()
    }

    #[test]
    fn first_upload_cites_genesis() {
        let mut s = AcaState::new();
        let p = make_upload_proof(&mut s, fid(1), genesis_digest(7)).unwrap();
        assert_eq!(p.prev_hash, genesis_digest(7));
        assert_eq!(p.index, 1);
        assert_ne!(genesis_digest(7), genesis_digest(8));
    }

    #[test]
    fn worked_example_proof_has_index_six() {
        let mut s = AcaState::new();
        let mut c = ProofChain::new(0);
        let proofs = six(&mut s, &mut c);
        assert_eq!(proofs[5].index, 6);
    }

    #[test]
    fn chain_of_hundred_links_each_to_predecessor() {
        let mut s = AcaState::new();
        let mut c = ProofChain::new(0);
        let proofs: Vec<_> = (0..100).map(|i| StateProof::Upload(upload(&mut s, &mut c, fid(i)))).collect();
        assert_eq!(proofs[0].prev_hash(), genesis_digest(0));
        for pair in proofs.windows(2) {
            assert_eq!(pair[1].prev_hash(), hash::hash_bytes(&pair[0].encode()));
        }
    }

    #[test]
    fn honest_deletions_verify_both_cases() {
        let mut s = AcaState::new();
        let mut c = ProofChain::new(0);
        six(&mut s, &mut c);
        let before = s.roots();
        let d = make_deletion_proof(&mut s, &fid(5), c.head()).unwrap();
        assert!(d.roots.0[1].is_some());
        assert_ne!(d.roots.0[1], before.0[1]);
        c.extend(&StateProof::Deletion(d)).unwrap();
        let d = make_deletion_proof(&mut s, &fid(6), c.head()).unwrap();
        assert!(d.roots.0[1].is_none());
        assert_eq!(d.witness.path.len(), 1);
        c.extend(&StateProof::Deletion(d)).unwrap();
    }

    #[test]
    fn sole_fid_deletion_keeps_witness() {
        let mut s = AcaState::new();
        let mut c = ProofChain::new(0);
        upload(&mut s, &mut c, fid(1));
        let d = make_deletion_proof(&mut s, &fid(1), c.head()).unwrap();
        assert_eq!(d.roots, RootVector(vec![None]));
        assert_eq!(verify_deletion_proof(&d, &c), Ok(()));
    }

    #[test]
    fn unknown_prev_hash_breaks_chain() {
        let mut s = AcaState::new();
        let c = ProofChain::new(0);
        let p = make_upload_proof(&mut s, fid(1), Digest([9; 32])).unwrap();
        assert_eq!(verify_upload_proof(&p, &c), Err(RejectReason::ChainBroken));
    }

    #[test]
    fn forged_witness_over_occupied_leaf_conflicts() {
        let mut s = AcaState::new();
        let mut c = ProofChain::new(0);
        six(&mut s, &mut c);
        // Overwrite FID2's leaf (tree 2, position 1) with a new FID.
        let mut forged = s.clone();
        forged.delete(&fid(2)).unwrap();
        let mut probe = forged.clone();
        while probe.location(&fid(50)).is_none() {
            // Fill vacancies until the new FID lands in FID2's old leaf.
            let a = probe.insert(fid(50)).unwrap();
            assert_eq!((a.tree_index, a.witness.leaf_position), (2, 1));
        }
        let w = probe.witness(&fid(50)).unwrap();
        let p = UploadProof {
            roots: probe.roots(),
            tree_index: 2,
            index: compute_index(&probe.roots(), 2, &w).unwrap(),
            witness: w,
            fid: fid(50),
            prev_hash: c.head(),
        };
        assert_eq!(verify_upload_proof(&p, &c), Err(RejectReason::IndexConflict));
    }

    #[test]
    fn index_field_mismatch_detected() {
        let mut s = AcaState::new();
        let mut c = ProofChain::new(0);
        six(&mut s, &mut c);
        let mut p = make_upload_proof(&mut s, fid(7), c.head()).unwrap();
        p.index += 1;
        assert_eq!(verify_upload_proof(&p, &c), Err(RejectReason::IndexMismatch));
    }

    #[test]
    fn fake_deletion_detected() {
        let mut s = AcaState::new();
        let mut c = ProofChain::new(0);
        six(&mut s, &mut c);
        let d = DeletionProof {
            roots: s.roots(),
            tree_index: 2,
            witness: s.witness(&fid(3)).unwrap(),
            fid: fid(3),
            leaf_position: 2,
            prev_hash: c.head(),
        };
        assert_eq!(verify_deletion_proof(&d, &c), Err(RejectReason::DeletionNotExecuted));
    }

    #[test]
    fn emptying_a_shared_tree_is_rejected() {
        let mut s = AcaState::new();
        let mut c = ProofChain::new(0);
        six(&mut s, &mut c);
        let mut roots = s.roots();
        roots.0[1] = None;
        let d = DeletionProof {
            roots,
            tree_index: 1,
            witness: s.witness(&fid(5)).unwrap(),
            fid: fid(5),
            leaf_position: 0,
            prev_hash: c.head(),
        };
        assert_eq!(verify_deletion_proof(&d, &c), Err(RejectReason::TamperedOtherTrees));
    }

    #[test]
    fn merge_with_wrong_sibling_rejected() {
        let mut s = AcaState::new();
        let mut c = ProofChain::new(0);
        upload(&mut s, &mut c, fid(1));
        let mut p = make_upload_proof(&mut s.clone(), fid(2), c.head()).unwrap();
        p.witness.path[0] = PathNode { sibling: fid(3).leaf_digest(), side: Side::Left };
        p.roots.0[1] = Some(p.witness.fold(fid(2).leaf_digest()));
        assert_eq!(verify_upload_proof(&p, &c), Err(RejectReason::StateTransitionInvalid));
    }

    #[test]
    fn encoding_round_trips() {
        let mut s = AcaState::new();
        let mut c = ProofChain::new(0);
        let p = StateProof::Upload(six(&mut s, &mut c).pop().unwrap());
        assert_eq!(StateProof::decode(&p.encode()).unwrap(), p);
        let d = StateProof::Deletion(make_deletion_proof(&mut s, &fid(1), c.head()).unwrap());
        assert_eq!(StateProof::decode(&d.encode()).unwrap(), d);
    }

    #[test]
    fn verification_cost_is_logarithmic() {
        let mut s = AcaState::new();
        let mut c = ProofChain::new(0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for i in 0..1000u32 {
            let p = StateProof::Upload(make_upload_proof(&mut s, fid(i), c.head()).unwrap());
            let (r, n) = hash::count(|| verify_proof(&p, &c));
            r.unwrap();
            assert!(n <= 2 * s.width() as u64 + 2, "{n} hashes at width {}", s.width());
            c.extend(&p).unwrap();
        }
        for _ in 0..200 {
            let live = s.indexed_fids();
            let f = live[rng.random_range(0..live.len())].1;
            let p = StateProof::Deletion(make_deletion_proof(&mut s, &f, c.head()).unwrap());
            let (r, n) = hash::count(|| verify_proof(&p, &c));
            r.unwrap();
            assert!(n <= 2 * s.width() as u64 + 2);
            c.extend(&p).unwrap();
        }
    }
}
