//! A miner's storage: accumulator, file store and PIR database kept coherent.
//!
//! The database is rebuilt incrementally after every mutation. Because an
//! index depends on which larger trees are occupied, one insertion or deletion
//! can move many files; only slots whose occupant changed are rewritten.
//!
//! Every mutation bumps the version. Queries name the `(db_size, version)` they
//! were built for and are answered from the current database or the one
//! retained predecessor.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;
use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::aca::{AcaState, Fid};
use crate::codec::{DecodeError, Reader, Writer};
use crate::db::{encode_record, Database, RecordError};
use crate::hash::{self, Digest};
use crate::ledger::apply_proof;
use crate::pir_single::{self, Hint, SpirParams};
use crate::proofs::{make_deletion_proof, make_upload_proof, RejectReason, StateProof};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StoreError {
    #[error("content hash does not match fid")]
    HashMismatch,
    #[error("fid already stored")]
    Duplicate,
    #[error("fid not stored")]
    Absent,
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error("proof does not apply: {0}")]
    Proof(#[from] RejectReason),
}

/// Why a query was not answered; carries what the client should retry with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Refusal {
    pub db_size: u64,
    pub version: u64,
}

#[derive(Debug)]
pub struct MinerStore {
    record_len: usize,
    aca: AcaState,
    files: BTreeMap<Fid, Vec<u8>>,
    /// `layout[i - 1]` is the FID whose record sits at index `i`.
    layout: Vec<Option<Fid>>,
    current: Arc<Database>,
    previous: Option<Arc<Database>>,
    hint_cache: Mutex<Option<Arc<Hint>>>,
}

impl Clone for MinerStore {
    fn clone(&self) -> Self {
        Self {
            record_len: self.record_len,
            aca: self.aca.clone(),
            files: self.files.clone(),
            layout: self.layout.clone(),
            current: self.current.clone(),
            previous: self.previous.clone(),
            hint_cache: Mutex::new(self.hint_cache.lock().expect("hint lock").clone()),
        }
    }
}

impl MinerStore {
    pub fn new(record_len: usize) -> Self {
        let aca = AcaState::new();
        let db = Database::new(aca.capacity(), record_len);
        Self {
            record_len,
            layout: vec![None; aca.capacity() as usize],
            aca,
            files: BTreeMap::new(),
            current: Arc::new(db),
            previous: None,
            hint_cache: Mutex::new(None),
        }
    }

    pub fn record_len(&self) -> usize {
        self.record_len
    }

    pub fn aca(&self) -> &AcaState {
        &self.aca
    }

    pub fn files(&self) -> &BTreeMap<Fid, Vec<u8>> {
        &self.files
    }

    pub fn file(&self, fid: &Fid) -> Option<&[u8]> {
        self.files.get(fid).map(Vec::as_slice)
    }

    pub fn database(&self) -> &Arc<Database> {
        &self.current
    }

    pub fn version(&self) -> u64 {
        self.current.version()
    }

    pub fn db_size(&self) -> u64 {
        self.current.db_size()
    }

    /// Checks that `bytes` may be stored under `fid`.
    pub fn admit(&self, fid: &Fid, bytes: &[u8]) -> Result<(), StoreError> {
        if Fid::of(bytes) != *fid {
            return Err(StoreError::HashMismatch);
        }
        if self.aca.contains(fid) {
            return Err(StoreError::Duplicate);
        }
        encode_record(bytes, self.record_len)?;
        Ok(())
    }

    /// Honest upload: inserts, builds the proof and stores the file.
    pub fn upload(&mut self, fid: Fid, bytes: &[u8], head: Digest) -> Result<StateProof, StoreError> {
        self.admit(&fid, bytes)?;
        let p = make_upload_proof(&mut self.aca, fid, head).expect("admitted");
        self.files.insert(fid, bytes.to_vec());
        self.sync();
        Ok(StateProof::Upload(p))
    }

    /// Honest deletion.
    pub fn delete(&mut self, fid: &Fid, head: Digest) -> Result<StateProof, StoreError> {
        let p = make_deletion_proof(&mut self.aca, fid, head).map_err(|_| StoreError::Absent)?;
        self.files.remove(fid);
        self.sync();
        Ok(StateProof::Deletion(p))
    }

    /// Applies a proof accepted elsewhere (a committed block). Uploads need
    /// the file content.
    pub fn apply(&mut self, proof: &StateProof, bytes: Option<&[u8]>) -> Result<(), StoreError> {
        if let StateProof::Upload(p) = proof {
            self.admit(&p.fid, bytes.unwrap_or_default())?;
        }
        let mut next = self.aca.clone();
        apply_proof(&mut next, proof)?;
        self.aca = next;
        match proof {
            StateProof::Upload(p) => {
                self.files.insert(p.fid, bytes.unwrap_or_default().to_vec());
            }
            StateProof::Deletion(p) => {
                self.files.remove(&p.fid);
            }
        }
        self.sync();
        Ok(())
    }

    /// Brings the database in line with the accumulator and bumps the version.
    fn sync(&mut self) {
        let size = self.aca.capacity();
        let mut layout = vec![None; size as usize];
        for (index, fid) in self.aca.indexed_fids() {
            layout[index as usize - 1] = Some(fid);
        }
        self.previous = Some(self.current.clone());
        let mut db = (*self.current).clone();
        db.reset_touches();
        db.resize(size);
        for (i, slot) in layout.iter().enumerate() {
            if self.layout.get(i) == Some(slot) {
                continue;
            }
            let index = i as u64 + 1;
            match slot {
                Some(f) => {
                    let rec = encode_record(&self.files[f], self.record_len).expect("admitted");
                    db.put(index, &rec).expect("in range");
                }
                None => db.clear(index).expect("in range"),
            }
        }
        db.set_version(self.current.version() + 1);
        self.layout = layout;
        self.current = Arc::new(db);
    }

    /// The database a query for `(db_size, version)` should run against.
    pub fn snapshot(&self, db_size: u64, version: u64) -> Result<Arc<Database>, Refusal> {
        for db in std::iter::once(&self.current).chain(self.previous.as_ref()) {
            if db.db_size() == db_size && db.version() == version {
                return Ok(db.clone());
            }
        }
        Err(Refusal { db_size: self.db_size(), version: self.version() })
    }

    /// Hint for the LWE backend over the current database, cached per version.
    pub fn hint(&self, params: &SpirParams) -> Arc<Hint> {
        let mut cache = self.hint_cache.lock().expect("hint lock");
        if let Some(h) = cache.as_ref() {
            if h.db_version == self.version() && h.db_size == self.db_size() {
                return h.clone();
            }
        }
        let h = Arc::new(pir_single::hint(&self.current, params));
        *cache = Some(h.clone());
        h
    }

    /// Full scan: occupied leaves correspond exactly to non-zero records holding
    /// the right files, and every stored file hashes to its FID.
    pub fn check_coherence(&self) -> bool {
        if !self.aca.check_consistency() || self.current.db_size() != self.aca.capacity() {
            return false;
        }
        let live = self.aca.indexed_fids();
        if live.len() != self.files.len() {
            return false;
        }
        let mut expected = vec![None; self.current.db_size() as usize];
        for (index, fid) in &live {
            expected[*index as usize - 1] = Some(*fid);
        }
        for (i, slot) in expected.iter().enumerate() {
            let index = i as u64 + 1;
            let ok = match slot {
                None => self.current.is_vacant(index),
                Some(f) => self.files.get(f).is_some_and(|b| {
                    Fid::of(b) == *f
                        && encode_record(b, self.record_len).ok().as_deref() == self.current.record(index).ok()
                }),
            };
            if !ok {
                return false;
            }
        }
        true
    }

    pub fn files_digest(&self) -> Digest {
        let mut w = Writer::new();
        for (f, b) in &self.files {
            w.digest(&Digest(f.0)).u64(b.len() as u64);
        }
        hash::hash_bytes(&w.finish())
    }

    /// Digest covering the accumulator, the database and the file store.
    pub fn state_digest(&self) -> Digest {
        let parts = [self.aca.digest(), self.current.digest(), self.files_digest()];
        hash::hash_parts(&[&parts[0].0, &parts[1].0, &parts[2].0])
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: self.version(),
            aca: self.aca.encode(),
            db_digest: self.current.digest(),
            files_digest: self.files_digest(),
        }
    }

    /// Rebuilds a store from a checkpoint and the file contents, checking the
    /// recorded digests.
    pub fn restore(cp: &Checkpoint, record_len: usize, files: BTreeMap<Fid, Vec<u8>>) -> Result<Self, CheckpointError> {
        let aca = AcaState::decode(&cp.aca).map_err(|_| CheckpointError::Corrupt("accumulator"))?;
        let complete = aca
            .indexed_fids()
            .iter()
            .all(|(_, f)| files.get(f).is_some_and(|b| Fid::of(b) == *f && encode_record(b, record_len).is_ok()));
        if !complete {
            return Err(CheckpointError::Corrupt("file store"));
        }
        let mut s = Self::new(record_len);
        s.aca = aca;
        s.files = files;
        s.layout = Vec::new();
        s.sync();
        let mut db = (*s.current).clone();
        db.set_version(cp.version);
        s.current = Arc::new(db);
        s.previous = None;
        if s.files_digest() != cp.files_digest {
            return Err(CheckpointError::Corrupt("file store"));
        }
        if s.current.digest() != cp.db_digest || !s.check_coherence() {
            return Err(CheckpointError::Corrupt("database"));
        }
        Ok(s)
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint {0} does not match")]
    Corrupt(&'static str),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

/// Restart record: the accumulator itself plus digests of what it indexes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Checkpoint {
    pub version: u64,
    pub aca: Vec<u8>,
    pub db_digest: Digest,
    pub files_digest: Digest,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u8(1).u64(self.version).bytes(&self.aca).digest(&self.db_digest).digest(&self.files_digest);
        w.finish()
    }

    pub fn decode(buf: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(buf);
        let v = r.u8()?;
        if v != 1 {
            return Err(DecodeError::BadVersion(v));
        }
        let cp =
            Self { version: r.u64()?, aca: r.bytes()?.to_vec(), db_digest: r.digest()?, files_digest: r.digest()? };
        r.finish()?;
        Ok(cp)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Ok(Self::decode(&fs::read(path)?)?)
    }
}
