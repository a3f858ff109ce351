//! Fixtures shared by the benches.

use pirdsn::db::Database;
use pirdsn::proofs::{make_upload_proof, UploadProof};
use pirdsn::{AcaState, Fid, ProofChain, StateProof};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A full database of `n` random records.
pub fn random_db(n: u64, record_len: usize, rng: &mut impl Rng) -> Database {
    let mut db = Database::new(n, record_len);
    for i in 1..=n {
        let rec: Vec<u8> = (0..record_len).map(|_| rng.random()).collect();
        db.put(i, &rec).expect("index in range");
    }
    db
}

/// A chain holding `n` uploads, plus the proof of one more upload that has
/// not been applied yet.
pub fn chain_with_pending_upload(n: u64) -> (ProofChain, UploadProof) {
    let mut state = AcaState::new();
    let mut chain = ProofChain::new(0);
    for i in 0..n {
        let p = make_upload_proof(&mut state, Fid::of(&i.to_le_bytes()), chain.head()).expect("fresh fid");
        chain.extend(&StateProof::Upload(p)).expect("honest proof");
    }
    let p = make_upload_proof(&mut state, Fid::of(b"next"), chain.head()).expect("fresh fid");
    (chain, p)
}
