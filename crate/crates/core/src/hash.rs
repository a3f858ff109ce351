//! SHA-256 digests with domain separation and a per-thread invocation counter.
//!
//! Every hash computed through this module bumps a thread-local counter so that
//! verification cost can be measured in hash invocations rather than wall time.

use std::cell::Cell;
use std::fmt;
use std::sync::OnceLock;

use sha2::{Digest as _, Sha256};

/// A 256-bit digest.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub const LEN: usize = 32;

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    /// Short hex prefix, for logs.
    pub fn short(&self) -> String {
        hex::encode(&self.0[..6])
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.short())
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

const LEAF_PREFIX: u8 = 0x00;
const NODE_PREFIX: u8 = 0x01;
const VACANT_TAG: &[u8] = b"ACA-VACANT";

thread_local! {
    static INVOCATIONS: Cell<u64> = const { Cell::new(0) };
}

/// Number of hash invocations performed on this thread so far.
pub fn invocations() -> u64 {
    INVOCATIONS.with(Cell::get)
}

/// Runs `f` and returns its result together with the hash invocations it made.
pub fn count<T>(f: impl FnOnce() -> T) -> (T, u64) {
    let before = invocations();
    let out = f();
    (out, invocations() - before)
}

fn bump() {
    INVOCATIONS.with(|c| c.set(c.get() + 1));
}

fn raw(parts: &[&[u8]]) -> Digest {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    Digest(h.finalize().into())
}

/// Hashes the concatenation of `parts`.
pub fn hash_parts(parts: &[&[u8]]) -> Digest {
    bump();
    raw(parts)
}

pub fn hash_bytes(data: &[u8]) -> Digest {
    hash_parts(&[data])
}

/// Digest of a Merkle leaf holding `item`.
pub fn leaf(item: &[u8; 32]) -> Digest {
    hash_parts(&[&[LEAF_PREFIX], item])
}

/// Digest of an internal Merkle node.
pub fn node(left: &Digest, right: &Digest) -> Digest {
    hash_parts(&[&[NODE_PREFIX], &left.0, &right.0])
}

/// Digest standing in for a vacant leaf.
pub fn vacant_leaf() -> Digest {
    *vacant_table().first().expect("table is non-empty")
}

/// Root digest of an all-vacant subtree with `2^height` leaves.
///
/// Heights up to 63 are served from a table built once; the table is a public
/// constant so lookups are not counted as invocations.
pub fn vacant_subtree(height: usize) -> Digest {
    vacant_table()[height]
}

fn vacant_table() -> &'static [Digest] {
    static TABLE: OnceLock<Vec<Digest>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut out = Vec::with_capacity(64);
        let mut cur = raw(&[VACANT_TAG]);
        out.push(cur);
        for _ in 1..64 {
            cur = raw(&[&[NODE_PREFIX], &cur.0, &cur.0]);
            out.push(cur);
        }
        out
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counter_tracks_invocations() {
        let (_, n) = count(|| {
            hash_bytes(b"a");
            node(&Digest::default(), &Digest::default());
        });
        assert_eq!(n, 2);
    }

    #[test]
    fn vacant_table_is_consistent() {
        assert_eq!(vacant_leaf(), raw(&[b"ACA-VACANT"]));
        let (d, n) = count(|| node(&vacant_subtree(2), &vacant_subtree(2)));
        assert_eq!(n, 1);
        assert_eq!(d, vacant_subtree(3));
    }

    #[test]
    fn domains_are_separated() {
        let x = [7u8; 32];
        assert_ne!(leaf(&x), hash_bytes(&x));
        assert_ne!(leaf(&x), node(&Digest(x), &Digest(x)));
    }
}
