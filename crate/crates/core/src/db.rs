//! The PIR database: a dense array of fixed-length records, where record `i`
//! (1-based) holds the file whose FID maps to index `i` and vacant indexes are
//! all zero.

use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use crate::hash::{self, Digest};

/// Bytes of the length prefix stored at the head of every record.
pub const LEN_PREFIX: usize = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RecordError {
    #[error("file of {len} bytes does not fit a {record_len}-byte record")]
    TooLarge { len: usize, record_len: usize },
    #[error("index {index} outside 1..={db_size}")]
    OutOfRange { index: u64, db_size: u64 },
}

/// Packs `file` into a record: 4-byte big-endian length, content, zero fill.
pub fn encode_record(file: &[u8], record_len: usize) -> Result<Vec<u8>, RecordError> {
    if file.len() + LEN_PREFIX > record_len {
        return Err(RecordError::TooLarge { len: file.len(), record_len });
    }
    let mut rec = vec![0u8; record_len];
    rec[..LEN_PREFIX].copy_from_slice(&(file.len() as u32).to_be_bytes());
    rec[LEN_PREFIX..LEN_PREFIX + file.len()].copy_from_slice(file);
    Ok(rec)
}

/// Unpacks a record. `None` if the length prefix overruns the record or the
/// fill after the content is not all zero.
pub fn decode_record(rec: &[u8]) -> Option<Vec<u8>> {
    let len = u32::from_be_bytes(rec.get(..LEN_PREFIX)?.try_into().ok()?) as usize;
    let end = LEN_PREFIX.checked_add(len)?;
    let body = rec.get(LEN_PREFIX..end)?;
    rec[end..].iter().all(|&b| b == 0).then(|| body.to_vec())
}

#[derive(Debug)]
pub struct Database {
    record_len: usize,
    db_size: u64,
    data: Vec<u8>,
    version: u64,
    touches: AtomicU64,
}

impl Clone for Database {
    fn clone(&self) -> Self {
        Self {
            record_len: self.record_len,
            db_size: self.db_size,
            data: self.data.clone(),
            version: self.version,
            touches: AtomicU64::new(self.touch_count()),
        }
    }
}

impl PartialEq for Database {
    fn eq(&self, other: &Self) -> bool {
        self.record_len == other.record_len && self.db_size == other.db_size && self.data == other.data
    }
}

impl Eq for Database {}

impl Database {
    pub fn new(db_size: u64, record_len: usize) -> Self {
        assert!(record_len > LEN_PREFIX, "record_len must exceed the length prefix");
        Self {
            record_len,
            db_size,
            data: vec![0; db_size as usize * record_len],
            version: 0,
            touches: AtomicU64::new(0),
        }
    }

    /// A database whose record `i` is `files[i - 1]` (encoded), `None` vacant.
    pub fn from_files(files: &[Option<&[u8]>], record_len: usize) -> Result<Self, RecordError> {
        let mut db = Self::new(files.len() as u64, record_len);
        for (i, f) in files.iter().enumerate() {
            if let Some(f) = f {
                db.put(i as u64 + 1, &encode_record(f, record_len)?)?;
            }
        }
        Ok(db)
    }

    pub fn db_size(&self) -> u64 {
        self.db_size
    }

    pub fn record_len(&self) -> usize {
        self.record_len
    }

    /// Number of applied mutations; tags query/answer pairs and hints.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn set_version(&mut self, v: u64) {
        self.version = v;
    }

    fn span(&self, index: u64) -> Result<std::ops::Range<usize>, RecordError> {
        if index == 0 || index > self.db_size {
            return Err(RecordError::OutOfRange { index, db_size: self.db_size });
        }
        let start = (index - 1) as usize * self.record_len;
        Ok(start..start + self.record_len)
    }

    /// Record `index` (1-based). Not counted as a touch.
    pub fn record(&self, index: u64) -> Result<&[u8], RecordError> {
        Ok(&self.data[self.span(index)?])
    }

    pub fn put(&mut self, index: u64, record: &[u8]) -> Result<(), RecordError> {
        assert_eq!(record.len(), self.record_len, "record length");
        let span = self.span(index)?;
        self.data[span].copy_from_slice(record);
        Ok(())
    }

    pub fn clear(&mut self, index: u64) -> Result<(), RecordError> {
        let span = self.span(index)?;
        self.data[span].fill(0);
        Ok(())
    }

    pub fn is_vacant(&self, index: u64) -> bool {
        self.record(index).is_ok_and(|r| r.iter().all(|&b| b == 0))
    }

    /// Grows (or shrinks) to `db_size` records, zero-filling new ones.
    pub fn resize(&mut self, db_size: u64) {
        self.db_size = db_size;
        self.data.resize(db_size as usize * self.record_len, 0);
    }

    /// Every record in index order. Each record yielded counts as one touch.
    pub fn scan(&self) -> impl Iterator<Item = &[u8]> + '_ {
        self.data.chunks_exact(self.record_len).inspect(|_| {
            self.touches.fetch_add(1, Ordering::Relaxed);
        })
    }

    /// Records visited by answer computations since the last reset.
    pub fn touch_count(&self) -> u64 {
        self.touches.load(Ordering::Relaxed)
    }

    pub fn reset_touches(&self) {
        self.touches.store(0, Ordering::Relaxed);
    }

    /// 1-based indexes of non-zero records.
    pub fn occupied_indexes(&self) -> Vec<u64> {
        (1..=self.db_size).filter(|&i| !self.is_vacant(i)).collect()
    }

    pub fn digest(&self) -> Digest {
        hash::hash_parts(&[&(self.record_len as u64).to_be_bytes(), &self.db_size.to_be_bytes(), &self.data])
    }
}
