//! Verifiable FID-to-index mapping for decentralized storage, with private
//! retrieval from a single miner (LWE) or a replicated subnet (robust
//! Shamir-shared PIR over GF(65537)), and a deterministic simulator tying the
//! pieces together.
//!
//! The most used types are re-exported at the crate root.

pub mod aca;
pub mod attacks;
pub mod client;
pub mod codec;
pub mod db;
pub mod galois;
pub mod hash;
pub mod ledger;
pub mod netsim;
pub mod node;
pub mod pir_multi;
pub mod pir_single;
pub mod proofs;
pub mod sim;
pub mod smr;
pub mod store;

pub use aca::{AcaState, Fid, RootVector, Witness};
pub use attacks::Attack;
pub use client::{Outcome, RetrievalReport};
pub use db::Database;
pub use hash::Digest;
pub use ledger::{ChainId, Ledger, LedgerError, Lookup};
pub use netsim::{Addr, NetConfig};
pub use node::{Mode, MpirMiner, SpirMiner, Strategy};
pub use pir_multi::Corruption;
pub use pir_single::{Backend, SpirParams};
pub use proofs::{ProofChain, RejectReason, StateProof};
pub use sim::{Row, Scenario, ScenarioError, SimReport};
pub use store::MinerStore;
