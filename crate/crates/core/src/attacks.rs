//! Index-manipulation attacks: forged proofs a malicious miner could publish.
//!
//! Every generator starts from the miner's true state and returns a proof that
//! deviates from the honest one in the way its attack class describes. None of
//! them mutate the caller's state.

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::aca::{compute_index, AcaState, Fid, InsertSlot};
use crate::hash::Digest;
use crate::proofs::{make_deletion_proof, make_upload_proof, DeletionProof, StateProof, UploadProof};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Attack {
    /// Map a new FID onto a leaf that is already in use.
    ConflictIndex,
    /// Map a new FID onto a vacant leaf other than the prescribed one, or
    /// publish an index that does not match its position.
    WrongVacantIndex,
    /// Delete a mapping the client did not ask to delete.
    DeleteWrongFid,
    /// Claim a deletion while leaving the mapping in place.
    FakeDelete,
    /// Alter the index of an existing FID at an arbitrary time.
    MutateIndex,
}

impl Attack {
    pub const ALL: [Attack; 5] = [
        Attack::ConflictIndex,
        Attack::WrongVacantIndex,
        Attack::DeleteWrongFid,
        Attack::FakeDelete,
        Attack::MutateIndex,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Attack::ConflictIndex => "1a-conflict-index",
            Attack::WrongVacantIndex => "1b-wrong-vacant-index",
            Attack::DeleteWrongFid => "2a-delete-wrong-fid",
            Attack::FakeDelete => "2b-fake-delete",
            Attack::MutateIndex => "3-mutate-index",
        }
    }

    pub fn is_upload(self) -> bool {
        matches!(self, Attack::ConflictIndex | Attack::WrongVacantIndex)
    }

    pub fn is_deletion(self) -> bool {
        matches!(self, Attack::DeleteWrongFid | Attack::FakeDelete)
    }
}

fn upload_proof_for(state: &AcaState, fid: Fid, index: u64, head: Digest) -> UploadProof {
    let (k, pos) = state.location(&fid).expect("fid placed");
    let witness = state.witness_at(k, pos).expect("valid leaf");
    UploadProof { roots: state.roots(), tree_index: k, witness, fid, index, prev_hash: head }
}

fn honest_index(state: &AcaState, fid: Fid) -> u64 {
    state.clone().insert(fid).expect("fid is new").index
}

/// Places `fid` over a random occupied leaf. `None` if the state is empty.
pub fn conflict_index<R: Rng + ?Sized>(state: &AcaState, fid: Fid, head: Digest, rng: &mut R) -> Option<UploadProof> {
    let occupied = state.indexed_fids();
    let &(_, victim) = occupied.choose(rng)?;
    let (k, pos) = state.location(&victim)?;
    let mut forged = state.clone();
    forged.set_leaf(k, pos, Some(fid)).ok()?;
    let w = forged.witness_at(k, pos).ok()?;
    let index = compute_index(&forged.roots(), k, &w).ok()?;
    Some(upload_proof_for(&forged, fid, index, head))
}

/// Places `fid` on a vacant leaf other than the prescribed one (when there is
/// one) while publishing the prescribed index; otherwise places it correctly
/// and publishes a shifted index.
pub fn wrong_vacant_index<R: Rng + ?Sized>(state: &AcaState, fid: Fid, head: Digest, rng: &mut R) -> UploadProof {
    let expected = honest_index(state, fid);
    let prescribed = match state.next_slot() {
        InsertSlot::Partial { k, pos } => Some((k, pos)),
        InsertSlot::Full { .. } => None,
    };
    let others: Vec<_> = state.vacant_leaves().into_iter().filter(|&l| Some(l) != prescribed).collect();
    if let Some(&(k, pos)) = others.choose(rng) {
        let mut forged = state.clone();
        forged.set_leaf(k, pos, Some(fid)).expect("vacant leaf");
        let actual = forged.index_of(&fid).expect("placed");
        let index = if actual == expected { expected + 1 } else { expected };
        return upload_proof_for(&forged, fid, index, head);
    }
    let mut forged = state.clone();
    let mut p = make_upload_proof(&mut forged, fid, head).expect("fid is new");
    p.index += rng.random_range(1..=forged.capacity());
    p
}

/// Claims deletion of `requested` while removing some other FID instead (or
/// as well). `None` if `requested` is the only FID.
pub fn delete_wrong_fid<R: Rng + ?Sized>(
    state: &AcaState,
    requested: &Fid,
    head: Digest,
    rng: &mut R,
) -> Option<DeletionProof> {
    let witness = state.witness(requested).ok()?;
    let others: Vec<Fid> = state.indexed_fids().into_iter().map(|(_, f)| f).filter(|f| f != requested).collect();
    let victim = *others.choose(rng)?;
    let mut forged = state.clone();
    forged.delete(&victim).ok()?;
    if rng.random_bool(0.5) {
        forged.delete(requested).ok()?;
    }
    Some(DeletionProof {
        roots: forged.roots(),
        tree_index: witness.tree_index,
        leaf_position: witness.leaf_position,
        witness,
        fid: *requested,
        prev_hash: head,
    })
}

/// Publishes a deletion proof for `requested` with an unchanged root vector.
pub fn fake_delete(state: &AcaState, requested: &Fid, head: Digest) -> Option<DeletionProof> {
    let witness = state.witness(requested).ok()?;
    Some(DeletionProof {
        roots: state.roots(),
        tree_index: witness.tree_index,
        leaf_position: witness.leaf_position,
        witness,
        fid: *requested,
        prev_hash: head,
    })
}

/// Changes the index of an existing FID and publishes the result. `None` if
/// the state is empty.
pub fn mutate_index<R: Rng + ?Sized>(state: &AcaState, head: Digest, rng: &mut R) -> Option<StateProof> {
    let live = state.indexed_fids();
    let &(index, target) = live.choose(rng)?;
    let vacancies = state.vacant_leaves();
    let variant = rng.random_range(0..5);
    let mut forged = state.clone();
    match variant {
        // Move the FID to some vacant leaf.
        0 if !vacancies.is_empty() => {
            let &(k, pos) = vacancies.choose(rng)?;
            forged.delete(&target).ok()?;
            forged.set_leaf(k, pos, Some(target)).ok()?;
            let new_index = forged.index_of(&target)?;
            Some(StateProof::Upload(upload_proof_for(&forged, target, new_index, head)))
        }
        // Swap the FID with another one.
        1 if live.len() > 1 => {
            let others: Vec<Fid> = live.iter().map(|&(_, f)| f).filter(|f| *f != target).collect();
            let other = *others.choose(rng)?;
            let a = state.location(&target)?;
            let b = state.location(&other)?;
            forged.set_leaf(a.0, a.1, None).ok()?;
            forged.set_leaf(b.0, b.1, Some(target)).ok()?;
            forged.set_leaf(a.0, a.1, Some(other)).ok()?;
            let new_index = forged.index_of(&target)?;
            Some(StateProof::Upload(upload_proof_for(&forged, target, new_index, head)))
        }
        // Map the FID to a second, vacant leaf while keeping the first.
        4 if !vacancies.is_empty() => {
            let &(k, pos) = vacancies.choose(rng)?;
            forged.set_leaf(k, pos, Some(Fid([0xAA; 32]))).ok()?;
            let witness = forged.witness_at(k, pos).ok()?;
            let mut roots = state.roots();
            roots.0[k] = Some(witness.fold(target.leaf_digest()));
            let index = compute_index(&roots, k, &witness).ok()?;
            Some(StateProof::Upload(UploadProof { roots, tree_index: k, witness, fid: target, index, prev_hash: head }))
        }
        // Re-announce the existing mapping as a fresh upload.
        2 => Some(StateProof::Upload(upload_proof_for(state, target, index, head))),
        // Announce an arbitrary index for the FID.
        _ => {
            let shifted = index + rng.random_range(1..=state.capacity());
            Some(StateProof::Upload(upload_proof_for(state, target, shifted, head)))
        }
    }
}

/// Runs `attack` against `state`. `target` is the FID being uploaded for upload
/// attacks, or the FID whose deletion was requested for deletion attacks.
pub fn forge<R: Rng + ?Sized>(
    attack: Attack,
    state: &AcaState,
    target: Fid,
    head: Digest,
    rng: &mut R,
) -> Option<StateProof> {
    match attack {
        Attack::ConflictIndex => conflict_index(state, target, head, rng).map(StateProof::Upload),
        Attack::WrongVacantIndex => Some(StateProof::Upload(wrong_vacant_index(state, target, head, rng))),
        Attack::DeleteWrongFid => delete_wrong_fid(state, &target, head, rng).map(StateProof::Deletion),
        Attack::FakeDelete => fake_delete(state, &target, head).map(StateProof::Deletion),
        Attack::MutateIndex => mutate_index(state, head, rng),
    }
}

/// Honest counterpart of [`forge`]: the proof an honest miner would publish.
pub fn honest(state: &mut AcaState, upload: bool, target: Fid, head: Digest) -> Option<StateProof> {
    if upload {
        make_upload_proof(state, target, head).ok().map(StateProof::Upload)
    } else {
        make_deletion_proof(state, &target, head).ok().map(StateProof::Deletion)
    }
}
