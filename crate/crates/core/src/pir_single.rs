//! Single-server PIR behind a `(query, answer, decrypt)` contract.
//!
//! Two backends:
//!
//! * `Lwe`: secret-key LWE matrix PIR with a database-dependent hint. Records
//!   are columns; each record byte contributes two 4-bit rows. The public
//!   matrix `A` (one row of length `n` per record) expands from a seed, the
//!   hint is `H = D·A`, and a query for index `i` is `A·s + e + Δ·u_i` over
//!   `Z_{2^32}` with `Δ = 2^28`.
//! * `Plain`: a masked unit vector that reveals the index. It exists as a
//!   correctness oracle and refuses to run unless explicitly allowed.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{DecodeError, Reader, Writer};
pub use crate::db::{decode_record, encode_record, Database, RecordError};

pub const WIRE_VERSION: u8 = 1;

/// Plaintext bits per LWE row.
const PT_BITS: u32 = 4;
const PT_MASK: u32 = (1 << PT_BITS) - 1;
const DELTA_SHIFT: u32 = 32 - PT_BITS;
const DELTA: u32 = 1 << DELTA_SHIFT;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Lwe,
    Plain,
}

impl Backend {
    fn tag(self) -> u8 {
        match self {
            Backend::Lwe => 1,
            Backend::Plain => 2,
        }
    }

    fn from_tag(t: u8) -> Result<Self, DecodeError> {
        match t {
            1 => Ok(Backend::Lwe),
            2 => Ok(Backend::Plain),
            t => Err(DecodeError::BadTag(t)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpirParams {
    pub backend: Backend,
    /// LWE secret dimension.
    pub lwe_dim: usize,
    /// Standard deviation of the rounded Gaussian error.
    pub sigma: f64,
    /// Errors are clipped to `[-noise_clip, noise_clip]`.
    pub noise_clip: u32,
    /// Seed expanding the public matrix.
    pub matrix_seed: u64,
    /// Must be set for the plain backend to run.
    pub allow_insecure: bool,
}

impl Default for SpirParams {
    fn default() -> Self {
        Self { backend: Backend::Lwe, lwe_dim: 1024, sigma: 6.4, noise_clip: 38, matrix_seed: 0, allow_insecure: false }
    }
}

impl SpirParams {
    /// The non-private oracle backend.
    pub fn plain_insecure() -> Self {
        Self { backend: Backend::Plain, allow_insecure: true, ..Self::default() }
    }

    fn check(&self) -> Result<(), PirError> {
        if self.backend == Backend::Plain && !self.allow_insecure {
            return Err(PirError::InsecureBackend);
        }
        Ok(())
    }

    /// Worst-case noise magnitude after answering over `db_size` records.
    fn noise_bound(&self, db_size: u64) -> u64 {
        db_size * u64::from(PT_MASK) * u64::from(self.noise_clip)
    }

    /// Largest database the LWE backend decrypts without failure.
    pub fn max_db_size(&self) -> u64 {
        (u64::from(DELTA) / 2 - 1) / (u64::from(PT_MASK) * u64::from(self.noise_clip).max(1))
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PirError {
    #[error("the plain backend is not private and is disabled")]
    InsecureBackend,
    #[error("index {index} outside 1..={db_size}")]
    IndexOutOfRange { index: u64, db_size: u64 },
    #[error("query for {query_size} records of {query_len} bytes, database has {db_size} of {db_len}")]
    SizeMismatch { query_size: u64, query_len: usize, db_size: u64, db_len: usize },
    #[error("backend mismatch")]
    BackendMismatch,
    #[error("database version {got} does not match {expected}")]
    StaleVersion { expected: u64, got: u64 },
    #[error("database of {db_size} records exceeds the decryption margin")]
    DatabaseTooLarge { db_size: u64 },
    #[error("decryption noise {residual} exceeds bound {bound} in row {row}")]
    NoiseOverflow { row: usize, residual: i64, bound: u64 },
    #[error("malformed answer: {0}")]
    Malformed(&'static str),
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

/// Row `j` of the public matrix.
fn matrix_row(seed: u64, j: u64, n: usize, out: &mut [u32]) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(j);
    debug_assert_eq!(out.len(), n);
    for x in out.iter_mut() {
        *x = r.next_u32();
    }
}

/// Client-side precomputation for one database version (`H = D·A`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Hint {
    pub db_version: u64,
    pub db_size: u64,
    pub record_len: usize,
    n: usize,
    rows: Vec<u32>,
}

impl Hint {
    pub fn size_bytes(&self) -> usize {
        self.rows.len() * 4
    }
}

/// Builds the hint for `db` under `params`.
pub fn hint(db: &Database, params: &SpirParams) -> Hint {
    let n = params.lwe_dim;
    let record_len = db.record_len();
    let mut rows = Vec::new();
    if params.backend == Backend::Lwe {
        rows = vec![0u32; 2 * record_len * n];
        let mut a = vec![0u32; n];
        for j in 1..=db.db_size() {
            let rec = db.record(j).expect("in range");
            if rec.iter().all(|&b| b == 0) {
                continue;
            }
            matrix_row(params.matrix_seed, j - 1, n, &mut a);
            for (b, &byte) in rec.iter().enumerate() {
                for (half, d) in [(0, u32::from(byte) & PT_MASK), (1, u32::from(byte) >> PT_BITS)] {
                    if d == 0 {
                        continue;
                    }
                    let row = &mut rows[(2 * b + half) * n..(2 * b + half + 1) * n];
                    for (h, &x) in row.iter_mut().zip(&a) {
                        *h = h.wrapping_add(d.wrapping_mul(x));
                    }
                }
            }
        }
    }
    Hint { db_version: db.version(), db_size: db.db_size(), record_len, n, rows }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SingleQuery {
    pub backend: Backend,
    pub db_size: u64,
    pub record_len: usize,
    pub db_version: u64,
    body: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SingleAnswer {
    pub backend: Backend,
    pub db_version: u64,
    body: Vec<u32>,
}

/// Secret material retained by the client between query and decryption.
#[derive(Clone, Debug)]
pub struct SingleClientState {
    pub backend: Backend,
    pub index: u64,
    pub db_size: u64,
    pub record_len: usize,
    pub db_version: u64,
    secret: Vec<u32>,
    noise_bound: u64,
}

fn write_words(w: &mut Writer, words: &[u32]) {
    w.len_prefix(words.len());
    for &x in words {
        w.u32(x);
    }
}

fn read_words(r: &mut Reader<'_>) -> Result<Vec<u32>, DecodeError> {
    let n = r.len_prefix(4)?;
    (0..n).map(|_| r.u32()).collect()
}

fn read_header(r: &mut Reader<'_>) -> Result<Backend, DecodeError> {
    let v = r.u8()?;
    if v != WIRE_VERSION {
        return Err(DecodeError::BadVersion(v));
    }
    Backend::from_tag(r.u8()?)
}

impl SingleQuery {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u8(WIRE_VERSION).u8(self.backend.tag()).u64(self.db_size).u32(self.record_len as u32).u64(self.db_version);
        write_words(&mut w, &self.body);
        w.finish()
    }

    pub fn decode(buf: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(buf);
        let backend = read_header(&mut r)?;
        let db_size = r.u64()?;
        let record_len = r.u32()? as usize;
        let db_version = r.u64()?;
        let body = read_words(&mut r)?;
        r.finish()?;
        Ok(Self { backend, db_size, record_len, db_version, body })
    }

    pub fn size_bytes(&self) -> usize {
        self.body.len() * 4
    }
}

impl SingleAnswer {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u8(WIRE_VERSION).u8(self.backend.tag()).u64(self.db_version);
        write_words(&mut w, &self.body);
        w.finish()
    }

    pub fn decode(buf: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(buf);
        let backend = read_header(&mut r)?;
        let db_version = r.u64()?;
        let body = read_words(&mut r)?;
        r.finish()?;
        Ok(Self { backend, db_version, body })
    }

    /// Flips bits of one answer word. Models a miner tampering with its reply.
    pub fn tamper<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        if self.body.is_empty() {
            return;
        }
        let i = rng.random_range(0..self.body.len());
        self.body[i] ^= rng.random_range(1..=u32::MAX);
    }

    pub fn size_bytes(&self) -> usize {
        self.body.len() * 4
    }
}

fn rounded_gaussian<R: Rng + ?Sized>(dist: &Normal<f64>, clip: u32, rng: &mut R) -> u32 {
    let clip = f64::from(clip);
    let e = dist.sample(rng).round().clamp(-clip, clip) as i32;
    e as u32
}

/// Inverse of an odd `a` modulo `2^32` by Newton iteration.
fn inv_mod_2_32(a: u32) -> u32 {
    debug_assert!(a & 1 == 1);
    let mut x = a;
    for _ in 0..5 {
        x = x.wrapping_mul(2u32.wrapping_sub(a.wrapping_mul(x)));
    }
    x
}

/// Builds a query for record `index` (1-based) of a `db_size`-record database.
pub fn s_query<R: Rng + ?Sized>(
    index: u64,
    db_size: u64,
    record_len: usize,
    db_version: u64,
    params: &SpirParams,
    rng: &mut R,
) -> Result<(SingleClientState, SingleQuery), PirError> {
    params.check()?;
    if index == 0 || index > db_size {
        return Err(PirError::IndexOutOfRange { index, db_size });
    }
    let target = (index - 1) as usize;
    let (secret, body) = match params.backend {
        Backend::Lwe => {
            if db_size > params.max_db_size() {
                return Err(PirError::DatabaseTooLarge { db_size });
            }
            let n = params.lwe_dim;
            let s: Vec<u32> = (0..n).map(|_| rng.next_u32()).collect();
            let dist = Normal::new(0.0, params.sigma).expect("valid sigma");
            let mut a = vec![0u32; n];
            let body = (0..db_size as usize)
                .map(|j| {
                    matrix_row(params.matrix_seed, j as u64, n, &mut a);
                    let dot = a.iter().zip(&s).fold(0u32, |acc, (&x, &y)| acc.wrapping_add(x.wrapping_mul(y)));
                    let e = rounded_gaussian(&dist, params.noise_clip, rng);
                    let m = if j == target { DELTA } else { 0 };
                    dot.wrapping_add(e).wrapping_add(m)
                })
                .collect();
            (s, body)
        }
        Backend::Plain => {
            let mask = rng.next_u32() | 1;
            let body = (0..db_size as usize).map(|j| if j == target { mask } else { 0 }).collect();
            (vec![mask], body)
        }
    };
    let state = SingleClientState {
        backend: params.backend,
        index,
        db_size,
        record_len,
        db_version,
        secret,
        noise_bound: params.noise_bound(db_size),
    };
    let query = SingleQuery { backend: params.backend, db_size, record_len, db_version, body };
    Ok((state, query))
}

/// Answers `query` over every record of `db`.
pub fn s_answer(db: &Database, query: &SingleQuery) -> Result<SingleAnswer, PirError> {
    if query.db_size != db.db_size() || query.record_len != db.record_len() || query.body.len() as u64 != db.db_size() {
        return Err(PirError::SizeMismatch {
            query_size: query.db_size,
            query_len: query.record_len,
            db_size: db.db_size(),
            db_len: db.record_len(),
        });
    }
    let body = match query.backend {
        Backend::Lwe => {
            let mut acc = vec![0u32; 2 * db.record_len()];
            for (rec, &q) in db.scan().zip(&query.body) {
                for (b, &byte) in rec.iter().enumerate() {
                    let lo = u32::from(byte) & PT_MASK;
                    let hi = u32::from(byte) >> PT_BITS;
                    acc[2 * b] = acc[2 * b].wrapping_add(lo.wrapping_mul(q));
                    acc[2 * b + 1] = acc[2 * b + 1].wrapping_add(hi.wrapping_mul(q));
                }
            }
            acc
        }
        Backend::Plain => {
            let mut acc = vec![0u32; db.record_len()];
            for (rec, &q) in db.scan().zip(&query.body) {
                for (a, &byte) in acc.iter_mut().zip(rec) {
                    *a = a.wrapping_add(u32::from(byte).wrapping_mul(q));
                }
            }
            acc
        }
    };
    Ok(SingleAnswer { backend: query.backend, db_version: db.version(), body })
}

/// Recovers the queried record. The LWE backend needs the hint for the
/// database version the answer was computed over.
pub fn s_decrypt(state: &SingleClientState, answer: &SingleAnswer, hint: Option<&Hint>) -> Result<Vec<u8>, PirError> {
    if answer.backend != state.backend {
        return Err(PirError::BackendMismatch);
    }
    match state.backend {
        Backend::Lwe => {
            let hint = hint.ok_or(PirError::Malformed("missing hint"))?;
            if hint.db_version != answer.db_version {
                return Err(PirError::StaleVersion { expected: answer.db_version, got: hint.db_version });
            }
            if answer.body.len() != 2 * state.record_len || hint.rows.len() != answer.body.len() * state.secret.len() {
                return Err(PirError::Malformed("answer length"));
            }
            let n = state.secret.len();
            let mut out = vec![0u8; state.record_len];
            for (r, &ans) in answer.body.iter().enumerate() {
                let h = &hint.rows[r * n..(r + 1) * n];
                let dot = h.iter().zip(&state.secret).fold(0u32, |acc, (&x, &y)| acc.wrapping_add(x.wrapping_mul(y)));
                let v = ans.wrapping_sub(dot);
                let d = v.wrapping_add(DELTA / 2) >> DELTA_SHIFT;
                let residual = i64::from(v.wrapping_sub(d << DELTA_SHIFT) as i32);
                if residual.unsigned_abs() > state.noise_bound {
                    return Err(PirError::NoiseOverflow { row: r, residual, bound: state.noise_bound });
                }
                out[r / 2] |= (d as u8) << (PT_BITS * (r as u32 % 2));
            }
            Ok(out)
        }
        Backend::Plain => {
            if answer.body.len() != state.record_len {
                return Err(PirError::Malformed("answer length"));
            }
            let inv = inv_mod_2_32(state.secret[0]);
            answer
                .body
                .iter()
                .map(|&x| u8::try_from(x.wrapping_mul(inv)).map_err(|_| PirError::Malformed("byte out of range")))
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn small_lwe() -> SpirParams {
        SpirParams { lwe_dim: 64, ..SpirParams::default() }
    }

    fn random_db(size: u64, len: usize, r: &mut ChaCha8Rng) -> Database {
        let mut db = Database::new(size, len);
        for i in 1..=size {
            if r.random_bool(0.7) {
                let mut rec = vec![0u8; len];
                r.fill_bytes(&mut rec);
                db.put(i, &rec).unwrap();
            }
        }
        db
    }

    fn fetch(db: &Database, index: u64, p: &SpirParams, r: &mut ChaCha8Rng) -> Result<Vec<u8>, PirError> {
        let h = hint(db, p);
        let (st, q) = s_query(index, db.db_size(), db.record_len(), db.version(), p, r)?;
        let a = s_answer(db, &q)?;
        s_decrypt(&st, &a, Some(&h))
    }

    #[test]
    fn inverse_mod_power_of_two() {
        for a in [1u32, 3, 5, 0xFFFF_FFFF, 0x1234_5679] {
            assert_eq!(a.wrapping_mul(inv_mod_2_32(a)), 1);
        }
    }

    #[test]
    fn plain_requires_opt_in() {
        let p = SpirParams { backend: Backend::Plain, ..SpirParams::default() };
        assert_eq!(s_query(1, 3, 8, 0, &p, &mut rng(0)).unwrap_err(), PirError::InsecureBackend);
    }

    #[test]
    fn plain_round_trip_and_randomization() {
        let p = SpirParams::plain_insecure();
        let db = Database::from_files(&[Some(b"a"), Some(b"bb"), None], 8).unwrap();
        assert_eq!(decode_record(&fetch(&db, 2, &p, &mut rng(1)).unwrap()).unwrap(), b"bb");
        let (_, q1) = s_query(2, 3, 8, 0, &p, &mut rng(1)).unwrap();
        let (_, q2) = s_query(2, 3, 8, 0, &p, &mut rng(2)).unwrap();
        assert_ne!(q1.encode(), q2.encode());
    }

    #[test]
    fn lwe_sweep_matches_direct_lookup() {
        let mut r = rng(3);
        let p = small_lwe();
        let db = random_db(31, 32, &mut r);
        for i in 1..=31 {
            assert_eq!(fetch(&db, i, &p, &mut r).unwrap(), db.record(i).unwrap(), "index {i}");
        }
    }

    #[test]
    fn zero_database_answers_zero_record() {
        let p = small_lwe();
        let db = Database::new(7, 16);
        assert_eq!(fetch(&db, 3, &p, &mut rng(4)).unwrap(), vec![0u8; 16]);
    }

    #[test]
    fn answer_touches_every_record() {
        let p = small_lwe();
        let mut r = rng(5);
        let db = random_db(63, 16, &mut r);
        let (_, q) = s_query(5, 63, 16, 0, &p, &mut r).unwrap();
        db.reset_touches();
        s_answer(&db, &q).unwrap();
        assert_eq!(db.touch_count(), 63);
    }

    #[test]
    fn query_is_not_a_unit_vector() {
        let p = small_lwe();
        let (_, q) = s_query(2, 7, 16, 0, &p, &mut rng(6)).unwrap();
        for i in 0..7 {
            let unit: Vec<u32> = (0..7).map(|j| if j == i { DELTA } else { 0 }).collect();
            assert_ne!(q.body, unit);
        }
    }

    #[test]
    fn size_mismatch_refused() {
        let p = small_lwe();
        let db = Database::new(7, 16);
        let (_, q) = s_query(2, 3, 16, 0, &p, &mut rng(7)).unwrap();
        assert!(matches!(s_answer(&db, &q), Err(PirError::SizeMismatch { .. })));
    }

    #[test]
    fn stale_hint_refused() {
        let p = small_lwe();
        let mut db = Database::new(7, 16);
        let h = hint(&db, &p);
        db.set_version(1);
        let (st, q) = s_query(2, 7, 16, 1, &p, &mut rng(8)).unwrap();
        let a = s_answer(&db, &q).unwrap();
        assert!(matches!(s_decrypt(&st, &a, Some(&h)), Err(PirError::StaleVersion { .. })));
    }

    #[test]
    fn tampered_answers_never_decrypt_to_the_record() {
        let p = small_lwe();
        let mut r = rng(9);
        let db = random_db(15, 16, &mut r);
        let h = hint(&db, &p);
        for _ in 0..50 {
            let (st, q) = s_query(4, 15, 16, 0, &p, &mut r).unwrap();
            let mut a = s_answer(&db, &q).unwrap();
            a.tamper(&mut r);
            let out = s_decrypt(&st, &a, Some(&h));
            assert_ne!(out.as_deref().ok(), Some(db.record(4).unwrap()));
        }
    }

    #[test]
    fn wire_round_trip() {
        let p = small_lwe();
        let db = Database::new(7, 16);
        let (_, q) = s_query(2, 7, 16, 0, &p, &mut rng(10)).unwrap();
        assert_eq!(SingleQuery::decode(&q.encode()).unwrap(), q);
        let a = s_answer(&db, &q).unwrap();
        assert_eq!(SingleAnswer::decode(&a.encode()).unwrap(), a);
        let mut bad = a.encode();
        bad[0] = 9;
        assert_eq!(SingleAnswer::decode(&bad), Err(DecodeError::BadVersion(9)));
    }

    #[test]
    fn margin_covers_desk_scale() {
        assert!(SpirParams::default().max_db_size() > 100_000);
    }
}
