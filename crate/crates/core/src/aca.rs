//! Merkle-forest accumulator mapping sparse FIDs onto compact indexes.
//!
//! The state is a vector of roots `r_0 .. r_{m-1}` where tree `i` has `2^i`
//! leaves. A slot is vacant (`None`) exactly when every leaf of its tree is
//! vacant. Insertion scans slots from the largest tree down and fills the first
//! vacancy it meets; when no slot has room, every existing leaf is merged into
//! one tree of `2^m` leaves (largest tree first, left to right) with the new FID
//! in the rightmost leaf.
//!
//! The index of a leaf counts the leaves of every occupied larger tree, plus the
//! leaf's position in its own tree, plus one. Occupancy changes in a large tree
//! therefore shift the indexes of FIDs held in smaller trees.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::codec::{DecodeError, Reader, Writer};
use crate::hash::{self, Digest};

/// File identifier: SHA-256 of the file content.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Fid(pub [u8; 32]);

impl Fid {
    pub fn of(content: &[u8]) -> Self {
        Fid(hash::hash_bytes(content).0)
    }

    pub fn leaf_digest(&self) -> Digest {
        hash::leaf(&self.0)
    }
}

impl fmt::Debug for Fid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fid({})", hex::encode(&self.0[..6]))
    }
}

impl fmt::Display for Fid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AcaError {
    #[error("fid {0:?} is already mapped")]
    DuplicateFid(Fid),
    #[error("fid {0:?} is not mapped")]
    FidAbsent(Fid),
    #[error("tree index {k} out of range for vector length {m}")]
    TreeOutOfRange { k: usize, m: usize },
    #[error("index {index} out of range")]
    IndexOutOfRange { index: u64 },
    #[error("witness has {len} path nodes, tree {k} needs {k}")]
    WitnessShape { k: usize, len: usize },
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

/// Which side of the path the sibling digest sits on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PathNode {
    pub sibling: Digest,
    pub side: Side,
}

/// Merkle path of one leaf, ordered from the leaf level upward.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Witness {
    pub tree_index: usize,
    pub leaf_position: u64,
    pub path: Vec<PathNode>,
}

impl Witness {
    /// Folds `leaf` up the path to a root, one hash per level.
    pub fn fold(&self, leaf: Digest) -> Digest {
        self.path.iter().fold(leaf, |acc, n| match n.side {
            Side::Left => hash::node(&n.sibling, &acc),
            Side::Right => hash::node(&acc, &n.sibling),
        })
    }

    /// Leaf position implied by the side indicators.
    pub fn position_from_sides(&self) -> u64 {
        self.path.iter().enumerate().filter(|(_, n)| n.side == Side::Left).map(|(j, _)| 1u64 << j).sum()
    }

    /// Path length equals the tree index and the side bits match the position.
    pub fn is_well_formed(&self) -> bool {
        self.path.len() == self.tree_index && self.position_from_sides() == self.leaf_position
    }

    pub fn encode(&self, w: &mut Writer) {
        w.u32(self.tree_index as u32).u64(self.leaf_position).len_prefix(self.path.len());
        for n in &self.path {
            w.digest(&n.sibling).u8(match n.side {
                Side::Left => 0,
                Side::Right => 1,
            });
        }
    }

    pub fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let tree_index = r.u32()? as usize;
        let leaf_position = r.u64()?;
        let len = r.len_prefix(33)?;
        let mut path = Vec::with_capacity(len);
        for _ in 0..len {
            let sibling = r.digest()?;
            let side = match r.u8()? {
                0 => Side::Left,
                1 => Side::Right,
                t => return Err(DecodeError::BadTag(t)),
            };
            path.push(PathNode { sibling, side });
        }
        Ok(Self { tree_index, leaf_position, path })
    }
}

/// The published root vector; `None` marks a vacant slot.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct RootVector(pub Vec<Option<Digest>>);

impl RootVector {
    /// The vector of a freshly generated accumulator: a single vacant slot.
    pub fn genesis() -> Self {
        RootVector(vec![None])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, k: usize) -> Option<Option<Digest>> {
        self.0.get(k).copied()
    }

    pub fn is_occupied(&self, k: usize) -> bool {
        matches!(self.0.get(k), Some(Some(_)))
    }

    /// `2^m - 1`.
    pub fn capacity(&self) -> u64 {
        (1u64 << self.0.len()) - 1
    }

    pub fn encode(&self, w: &mut Writer) {
        w.len_prefix(self.0.len());
        for r in &self.0 {
            match r {
                None => {
                    w.u8(0);
                }
                Some(d) => {
                    w.u8(1).digest(d);
                }
            }
        }
    }

    pub fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let len = r.len_prefix(1)?;
        let mut v = Vec::with_capacity(len);
        for _ in 0..len {
            v.push(match r.u8()? {
                0 => None,
                1 => Some(r.digest()?),
                t => return Err(DecodeError::BadTag(t)),
            });
        }
        Ok(RootVector(v))
    }
}

/// Computes the index of the leaf proven by `w` in tree `k` of `v`.
pub fn compute_index(v: &RootVector, k: usize, w: &Witness) -> Result<u64, AcaError> {
    let m = v.len();
    if k >= m {
        return Err(AcaError::TreeOutOfRange { k, m });
    }
    if w.path.len() != k {
        return Err(AcaError::WitnessShape { k, len: w.path.len() });
    }
    let mut index = 1u64;
    for i in (k + 1)..m {
        if v.is_occupied(i) {
            index += 1 << i;
        }
    }
    for (j, n) in w.path.iter().enumerate() {
        if n.side == Side::Left {
            index += 1 << j;
        }
    }
    Ok(index)
}

/// Maps an index back to `(tree, leaf position)` under the occupancy of `v`.
pub fn index_to_leaf(v: &RootVector, index: u64) -> Result<(usize, u64), AcaError> {
    if index == 0 {
        return Err(AcaError::IndexOutOfRange { index });
    }
    let mut rest = index - 1;
    for k in (0..v.len()).rev() {
        if !v.is_occupied(k) {
            continue;
        }
        let size = 1u64 << k;
        if rest < size {
            return Ok((k, rest));
        }
        rest -= size;
    }
    Err(AcaError::IndexOutOfRange { index })
}

/// True iff folding `fid`'s leaf digest up `w` reproduces slot `k` of `v`.
pub fn verify_membership(v: &RootVector, k: usize, w: &Witness, fid: &Fid) -> bool {
    match v.get(k) {
        Some(Some(root)) if w.path.len() == k => w.fold(fid.leaf_digest()) == root,
        _ => false,
    }
}

/// A complete binary Merkle tree of `2^height` leaves with every level cached.
#[derive(Clone, Debug, PartialEq, Eq)]
struct MerkleTree {
    leaves: Vec<Option<Fid>>,
    /// `levels[0]` are leaf digests, `levels[height]` is `[root]`.
    levels: Vec<Vec<Digest>>,
    occupied: usize,
}

impl MerkleTree {
    fn vacant(height: usize) -> Self {
        let levels = (0..=height).map(|l| vec![hash::vacant_subtree(l); 1 << (height - l)]).collect();
        Self { leaves: vec![None; 1 << height], levels, occupied: 0 }
    }

    fn from_leaves(leaves: Vec<Option<Fid>>) -> Self {
        debug_assert!(leaves.len().is_power_of_two());
        let mut level: Vec<Digest> =
            leaves.iter().map(|l| l.map_or_else(hash::vacant_leaf, |f| f.leaf_digest())).collect();
        let mut levels = vec![level.clone()];
        while level.len() > 1 {
            level = level.chunks(2).map(|p| hash::node(&p[0], &p[1])).collect();
            levels.push(level.clone());
        }
        let occupied = leaves.iter().filter(|l| l.is_some()).count();
        Self { leaves, levels, occupied }
    }

    fn height(&self) -> usize {
        self.levels.len() - 1
    }

    fn root(&self) -> Digest {
        self.levels[self.height()][0]
    }

    fn is_full(&self) -> bool {
        self.occupied == self.leaves.len()
    }

    /// First vacant leaf in pre-order (equivalently, left-to-right) order.
    fn first_vacant(&self) -> Option<usize> {
        self.leaves.iter().position(Option::is_none)
    }

    fn set(&mut self, pos: usize, value: Option<Fid>) {
        match (self.leaves[pos].is_some(), value.is_some()) {
            (false, true) => self.occupied += 1,
            (true, false) => self.occupied -= 1,
            _ => {}
        }
        self.leaves[pos] = value;
        let mut d = value.map_or_else(hash::vacant_leaf, |f| f.leaf_digest());
        let mut idx = pos;
        self.levels[0][idx] = d;
        for l in 1..=self.height() {
            let sib = self.levels[l - 1][idx ^ 1];
            d = if idx & 1 == 1 { hash::node(&sib, &d) } else { hash::node(&d, &sib) };
            idx >>= 1;
            self.levels[l][idx] = d;
        }
    }

    fn path(&self, pos: usize) -> Vec<PathNode> {
        (0..self.height())
            .map(|l| {
                let idx = pos >> l;
                let sibling = self.levels[l][idx ^ 1];
                let side = if idx & 1 == 1 { Side::Left } else { Side::Right };
                PathNode { sibling, side }
            })
            .collect()
    }
}

/// Where the next insertion lands.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InsertSlot {
    /// An existing slot has room: tree `k`, leaf `pos`.
    Partial { k: usize, pos: u64 },
    /// Every leaf is occupied; the vector grows to `k + 1` slots and the new FID
    /// takes the rightmost leaf of tree `k`.
    Full { k: usize },
}

/// Result of an insertion.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexAssignment {
    pub index: u64,
    pub fid: Fid,
    pub tree_index: usize,
    pub witness: Witness,
    pub slot: InsertSlot,
}

/// Which deletion case applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DeletionCase {
    /// Other FIDs remain in the tree; its root was recomputed.
    Recomputed,
    /// The FID was the tree's sole occupant; its slot became vacant.
    Emptied,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Deletion {
    pub fid: Fid,
    pub tree_index: usize,
    /// Path of the deleted leaf in the tree as it was before deletion.
    pub witness: Witness,
    pub case: DeletionCase,
}

/// The accumulator: a Merkle forest plus a FID → leaf location map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AcaState {
    trees: Vec<Option<MerkleTree>>,
    locations: BTreeMap<Fid, (usize, usize)>,
}

impl Default for AcaState {
    fn default() -> Self {
        Self::new()
    }
}

impl AcaState {
    /// A fresh accumulator: one vacant slot, capacity one.
    pub fn new() -> Self {
        Self { trees: vec![None], locations: BTreeMap::new() }
    }

    /// Vector length `m`.
    pub fn width(&self) -> usize {
        self.trees.len()
    }

    pub fn capacity(&self) -> u64 {
        (1u64 << self.trees.len()) - 1
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    pub fn contains(&self, fid: &Fid) -> bool {
        self.locations.contains_key(fid)
    }

    pub fn roots(&self) -> RootVector {
        RootVector(self.trees.iter().map(|t| t.as_ref().map(MerkleTree::root)).collect())
    }

    /// `(tree, leaf position)` of a mapped FID.
    pub fn location(&self, fid: &Fid) -> Option<(usize, u64)> {
        self.locations.get(fid).map(|&(k, p)| (k, p as u64))
    }

    pub fn fid_at(&self, k: usize, pos: u64) -> Option<Fid> {
        self.trees.get(k)?.as_ref()?.leaves.get(pos as usize).copied().flatten()
    }

    /// Number of occupied leaves in tree `k`.
    pub fn tree_occupancy(&self, k: usize) -> usize {
        self.trees.get(k).and_then(|t| t.as_ref()).map_or(0, |t| t.occupied)
    }

    /// Path for the leaf at `(k, pos)`, whether occupied or not.
    pub fn witness_at(&self, k: usize, pos: u64) -> Result<Witness, AcaError> {
        let m = self.width();
        let slot = self.trees.get(k).ok_or(AcaError::TreeOutOfRange { k, m })?;
        if pos >= 1 << k {
            return Err(AcaError::IndexOutOfRange { index: pos });
        }
        let path = match slot {
            Some(t) => t.path(pos as usize),
            None => MerkleTree::vacant(k).path(pos as usize),
        };
        Ok(Witness { tree_index: k, leaf_position: pos, path })
    }

    pub fn witness(&self, fid: &Fid) -> Result<Witness, AcaError> {
        let (k, pos) = self.location(fid).ok_or(AcaError::FidAbsent(*fid))?;
        self.witness_at(k, pos)
    }

    pub fn index_of(&self, fid: &Fid) -> Option<u64> {
        let w = self.witness(fid).ok()?;
        compute_index(&self.roots(), w.tree_index, &w).ok()
    }

    /// Occupied leaves as `(index, fid)`, in index order.
    pub fn indexed_fids(&self) -> Vec<(u64, Fid)> {
        let mut out = Vec::with_capacity(self.len());
        let mut base = 0u64;
        for k in (0..self.width()).rev() {
            let Some(t) = &self.trees[k] else { continue };
            for (pos, leaf) in t.leaves.iter().enumerate() {
                if let Some(f) = leaf {
                    out.push((base + pos as u64 + 1, *f));
                }
            }
            base += 1 << k;
        }
        out
    }

    /// Where the next insertion will go.
    pub fn next_slot(&self) -> InsertSlot {
        for k in (0..self.width()).rev() {
            match &self.trees[k] {
                None => return InsertSlot::Partial { k, pos: 0 },
                Some(t) if !t.is_full() => {
                    let pos = t.first_vacant().expect("tree has a vacancy") as u64;
                    return InsertSlot::Partial { k, pos };
                }
                Some(_) => {}
            }
        }
        InsertSlot::Full { k: self.width() }
    }

    pub fn insert(&mut self, fid: Fid) -> Result<IndexAssignment, AcaError> {
        if self.contains(&fid) {
            return Err(AcaError::DuplicateFid(fid));
        }
        let slot = self.next_slot();
        let (k, pos) = match slot {
            InsertSlot::Partial { k, pos } => {
                let tree = self.trees[k].get_or_insert_with(|| MerkleTree::vacant(k));
                tree.set(pos as usize, Some(fid));
                (k, pos as usize)
            }
            InsertSlot::Full { k } => {
                self.merge_into_new_tree(fid);
                (k, (1 << k) - 1)
            }
        };
        self.locations.insert(fid, (k, pos));
        let witness = self.witness_at(k, pos as u64)?;
        debug_assert_eq!(witness.path.len(), k);
        let index = compute_index(&self.roots(), k, &witness)?;
        Ok(IndexAssignment { index, fid, tree_index: k, witness, slot })
    }

    /// Merges every tree into a new largest tree with `fid` in its rightmost
    /// leaf, even if some merged leaves are vacant. Every slot must be
    /// occupied. Used to replay a published growth transition.
    pub fn grow_with(&mut self, fid: Fid) -> Result<(), AcaError> {
        if self.contains(&fid) {
            return Err(AcaError::DuplicateFid(fid));
        }
        if let Some(k) = self.trees.iter().position(Option::is_none) {
            return Err(AcaError::TreeOutOfRange { k, m: self.width() });
        }
        let k = self.width();
        self.merge_into_new_tree(fid);
        self.locations.insert(fid, (k, (1 << k) - 1));
        Ok(())
    }

    fn merge_into_new_tree(&mut self, fid: Fid) {
        let k = self.width();
        let mut leaves = Vec::with_capacity(1 << k);
        for slot in self.trees.iter().rev() {
            let t = slot.as_ref().expect("full accumulator has no vacant slot");
            leaves.extend(t.leaves.iter().copied());
        }
        leaves.push(Some(fid));
        for (pos, leaf) in leaves.iter().enumerate() {
            if let Some(f) = leaf {
                self.locations.insert(*f, (k, pos));
            }
        }
        for slot in self.trees.iter_mut() {
            *slot = None;
        }
        self.trees.push(Some(MerkleTree::from_leaves(leaves)));
    }

    pub fn delete(&mut self, fid: &Fid) -> Result<Deletion, AcaError> {
        let &(k, pos) = self.locations.get(fid).ok_or(AcaError::FidAbsent(*fid))?;
        let witness = self.witness_at(k, pos as u64)?;
        let tree = self.trees[k].as_mut().expect("located tree exists");
        tree.set(pos, None);
        let case = if tree.occupied == 0 {
            self.trees[k] = None;
            DeletionCase::Emptied
        } else {
            DeletionCase::Recomputed
        };
        self.locations.remove(fid);
        Ok(Deletion { fid: *fid, tree_index: k, witness, case })
    }

    /// Writes `value` into leaf `(k, pos)` without regard to the scan order.
    ///
    /// Models a miner deviating from the insertion rule; the honest paths
    /// never call it. Overwriting an occupied leaf unmaps its previous FID.
    pub fn set_leaf(&mut self, k: usize, pos: u64, value: Option<Fid>) -> Result<(), AcaError> {
        let m = self.width();
        if k >= m {
            return Err(AcaError::TreeOutOfRange { k, m });
        }
        if pos >= 1 << k {
            return Err(AcaError::IndexOutOfRange { index: pos });
        }
        if let Some(f) = value {
            if self.contains(&f) {
                return Err(AcaError::DuplicateFid(f));
            }
        }
        let tree = self.trees[k].get_or_insert_with(|| MerkleTree::vacant(k));
        if let Some(old) = tree.leaves[pos as usize] {
            self.locations.remove(&old);
        }
        tree.set(pos as usize, value);
        if tree.occupied == 0 {
            self.trees[k] = None;
        }
        if let Some(f) = value {
            self.locations.insert(f, (k, pos as usize));
        }
        Ok(())
    }

    /// Every vacant leaf as `(tree, position)`, largest tree first.
    pub fn vacant_leaves(&self) -> Vec<(usize, u64)> {
        let mut out = Vec::new();
        for k in (0..self.width()).rev() {
            match &self.trees[k] {
                None => out.extend((0..1u64 << k).map(|p| (k, p))),
                Some(t) => {
                    out.extend(t.leaves.iter().enumerate().filter(|(_, l)| l.is_none()).map(|(p, _)| (k, p as u64)))
                }
            }
        }
        out
    }

    /// Recomputes every root from its leaves and checks the cached levels,
    /// the vacancy rule and the location map.
    pub fn check_consistency(&self) -> bool {
        let mut count = 0;
        for (k, slot) in self.trees.iter().enumerate() {
            let Some(t) = slot else { continue };
            if t.height() != k || t.occupied == 0 {
                return false;
            }
            if MerkleTree::from_leaves(t.leaves.clone()) != *t {
                return false;
            }
            for (pos, leaf) in t.leaves.iter().enumerate() {
                if let Some(f) = leaf {
                    count += 1;
                    if self.locations.get(f) != Some(&(k, pos)) {
                        return false;
                    }
                }
            }
        }
        count == self.locations.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.len_prefix(self.trees.len());
        for slot in &self.trees {
            match slot {
                None => {
                    w.u8(0);
                }
                Some(t) => {
                    w.u8(1).digest(&t.root());
                    for leaf in &t.leaves {
                        match leaf {
                            None => w.u8(0),
                            Some(f) => w.u8(1).digest(&Digest(f.0)),
                        };
                    }
                }
            }
        }
        w.finish()
    }

    pub fn decode(buf: &[u8]) -> Result<Self, AcaError> {
        let mut r = Reader::new(buf);
        let m = r.len_prefix(1)?;
        if m == 0 || m > 40 {
            return Err(DecodeError::Invalid("vector length").into());
        }
        let mut trees = Vec::with_capacity(m);
        let mut locations = BTreeMap::new();
        for k in 0..m {
            match r.u8()? {
                0 => trees.push(None),
                1 => {
                    let root = r.digest()?;
                    if r.remaining() < 1 << k {
                        return Err(DecodeError::Truncated.into());
                    }
                    let mut leaves = Vec::with_capacity(1 << k);
                    for pos in 0..(1usize << k) {
                        leaves.push(match r.u8()? {
                            0 => None,
                            1 => {
                                let f = Fid(r.digest()?.0);
                                if locations.insert(f, (k, pos)).is_some() {
                                    return Err(AcaError::DuplicateFid(f));
                                }
                                Some(f)
                            }
                            t => return Err(DecodeError::BadTag(t).into()),
                        });
                    }
                    let t = MerkleTree::from_leaves(leaves);
                    if t.root() != root || t.occupied == 0 {
                        return Err(DecodeError::Invalid("tree root").into());
                    }
                    trees.push(Some(t));
                }
                t => return Err(DecodeError::BadTag(t).into()),
            }
        }
        r.finish()?;
        Ok(Self { trees, locations })
    }

    /// Digest of the canonical encoding.
    pub fn digest(&self) -> Digest {
        hash::hash_bytes(&self.encode())
    }
}
