//! Byzantine-robust multi-server PIR over GF(65537).
//!
//! The client Shamir-shares the unit vector `e_i` with threshold `t`: for every
//! record `j` it draws `f_j` of degree `t` with `f_j(0) = [j = i]` and sends
//! server `l` the evaluations at `α_l = l`. Each server returns the share-weighted
//! sum of its records, viewed as 2-byte words. Word `w` of the answers then
//! lies on a degree-`t` polynomial whose value at zero is word `w` of record `i`,
//! so Berlekamp–Welch decoding recovers it and names the servers that lied.

use std::collections::BTreeSet;

use rand::Rng;
use thiserror::Error;

use crate::codec::{DecodeError, Reader, Writer};
use crate::db::Database;
use crate::galois::{berlekamp_welch_decode, lagrange_weights_at_zero, EvaluationPoint, Fe, Polynomial};

pub const WIRE_VERSION: u8 = 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MultiError {
    #[error("index {index} outside 1..={db_size}")]
    IndexOutOfRange { index: u64, db_size: u64 },
    #[error("need t < N, got t={t}, N={n}")]
    Threshold { t: usize, n: usize },
    #[error("query for {query_size} records, database has {db_size}")]
    SizeMismatch { query_size: u64, db_size: u64 },
    #[error("{have} responses, at least {need} needed")]
    TooFewResponses { have: usize, need: usize },
    #[error("answer from unknown or duplicate server {0}")]
    BadResponder(u32),
    #[error("answer from server {0} has the wrong shape")]
    BadShape(u32),
    #[error("more corrupt answers than correctable; suspected {suspects:?}")]
    Unrecoverable { suspects: BTreeSet<u32> },
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

pub fn words_per_record(record_len: usize) -> usize {
    record_len.div_ceil(2)
}

/// Header shared by queries and answers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Header {
    pub n: u32,
    pub t: u32,
    pub db_size: u64,
    pub words_per_record: u32,
    pub db_version: u64,
}

impl Header {
    fn encode(&self, w: &mut Writer) {
        w.u8(WIRE_VERSION).u32(self.n).u32(self.t).u64(self.db_size).u32(self.words_per_record).u64(self.db_version);
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let v = r.u8()?;
        if v != WIRE_VERSION {
            return Err(DecodeError::BadVersion(v));
        }
        Ok(Self { n: r.u32()?, t: r.u32()?, db_size: r.u64()?, words_per_record: r.u32()?, db_version: r.u64()? })
    }
}

fn write_fes(w: &mut Writer, v: &[Fe]) {
    w.len_prefix(v.len());
    for x in v {
        w.u32(x.value());
    }
}

fn read_fes(r: &mut Reader<'_>) -> Result<Vec<Fe>, DecodeError> {
    let n = r.len_prefix(4)?;
    (0..n)
        .map(|_| {
            let v = r.u32()?;
            if v >= crate::galois::MODULUS {
                return Err(DecodeError::Invalid("field element"));
            }
            Ok(Fe::from(v))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MultiQuery {
    pub header: Header,
    /// 1-based position of the server in the subnet; also its abscissa.
    pub server: u32,
    pub shares: Vec<Fe>,
}

impl MultiQuery {
    pub fn alpha(&self) -> Fe {
        Fe::from(self.server)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.header.encode(&mut w);
        w.u32(self.server);
        write_fes(&mut w, &self.shares);
        w.finish()
    }

    pub fn decode(buf: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(buf);
        let header = Header::decode(&mut r)?;
        let server = r.u32()?;
        let shares = read_fes(&mut r)?;
        r.finish()?;
        Ok(Self { header, server, shares })
    }

    pub fn size_bytes(&self) -> usize {
        self.shares.len() * 4
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MultiAnswer {
    pub header: Header,
    pub server: u32,
    pub words: Vec<Fe>,
}

impl MultiAnswer {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.header.encode(&mut w);
        w.u32(self.server);
        write_fes(&mut w, &self.words);
        w.finish()
    }

    pub fn decode(buf: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(buf);
        let header = Header::decode(&mut r)?;
        let server = r.u32()?;
        let words = read_fes(&mut r)?;
        r.finish()?;
        Ok(Self { header, server, words })
    }

    pub fn size_bytes(&self) -> usize {
        self.words.len() * 4
    }
}

#[derive(Clone, Debug)]
pub struct MultiClientState {
    pub index: u64,
    pub header: Header,
    pub record_len: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReconstructResult {
    pub record: Vec<u8>,
    pub honest: BTreeSet<u32>,
    pub faulty: BTreeSet<u32>,
}

/// Shares the unit vector for `index` among `n` servers with threshold `t`.
pub fn m_query<R: Rng + ?Sized>(
    index: u64,
    db_size: u64,
    record_len: usize,
    db_version: u64,
    n: usize,
    t: usize,
    rng: &mut R,
) -> Result<(MultiClientState, Vec<MultiQuery>), MultiError> {
    if index == 0 || index > db_size {
        return Err(MultiError::IndexOutOfRange { index, db_size });
    }
    if t >= n {
        return Err(MultiError::Threshold { t, n });
    }
    let header =
        Header { n: n as u32, t: t as u32, db_size, words_per_record: words_per_record(record_len) as u32, db_version };
    let mut queries: Vec<MultiQuery> = (1..=n as u32)
        .map(|server| MultiQuery { header, server, shares: Vec::with_capacity(db_size as usize) })
        .collect();
    for j in 1..=db_size {
        let secret = if j == index { Fe::ONE } else { Fe::ZERO };
        let f = Polynomial::random_with_constant(secret, t, rng);
        for q in queries.iter_mut() {
            let share = f.eval(q.alpha());
            q.shares.push(share);
        }
    }
    Ok((MultiClientState { index, header, record_len }, queries))
}

/// Splits a record into big-endian 2-byte words, zero-padding an odd tail.
pub fn record_words(rec: &[u8]) -> impl Iterator<Item = u32> + '_ {
    rec.chunks(2).map(|c| (u32::from(c[0]) << 8) | u32::from(c.get(1).copied().unwrap_or(0)))
}

/// Share-weighted sum of every record of `db`, word by word.
pub fn m_answer(db: &Database, q: &MultiQuery) -> Result<MultiAnswer, MultiError> {
    if q.header.db_size != db.db_size() || q.shares.len() as u64 != db.db_size() {
        return Err(MultiError::SizeMismatch { query_size: q.header.db_size, db_size: db.db_size() });
    }
    let wpr = words_per_record(db.record_len());
    if q.header.words_per_record as usize != wpr {
        return Err(MultiError::BadShape(q.server));
    }
    const P: u64 = crate::galois::MODULUS as u64;
    // Lazy reduction: each product is below 2^33, so reducing once the
    // accumulator passes 2^63 keeps it in range.
    let mut acc = vec![0u64; wpr];
    for (rec, share) in db.scan().zip(&q.shares) {
        let s = u64::from(share.value());
        if s == 0 {
            continue;
        }
        for (a, word) in acc.iter_mut().zip(record_words(rec)) {
            *a += s * u64::from(word);
            if *a >= 1 << 63 {
                *a %= P;
            }
        }
    }
    let mut header = q.header;
    header.db_version = db.version();
    Ok(MultiAnswer { header, server: q.server, words: acc.into_iter().map(|a| Fe::new(a % P)).collect() })
}

/// Decodes the queried record from the answers received.
///
/// `e_max` follows from the number of answers. Errors are located word by word
/// and their union is reported; if that union exceeds `e_max` the adversary
/// broke the bound decoding relies on, and the result is refused.
pub fn m_reconstruct(state: &MultiClientState, answers: &[MultiAnswer]) -> Result<ReconstructResult, MultiError> {
    let t = state.header.t as usize;
    let k = answers.len();
    if k < t + 1 {
        return Err(MultiError::TooFewResponses { have: k, need: t + 1 });
    }
    let e_max = (k - t - 1) / 2;
    let wpr = state.header.words_per_record as usize;
    let mut seen = BTreeSet::new();
    for a in answers {
        if a.server == 0 || a.server > state.header.n || !seen.insert(a.server) {
            return Err(MultiError::BadResponder(a.server));
        }
        if a.words.len() != wpr {
            return Err(MultiError::BadShape(a.server));
        }
    }
    let xs: Vec<Fe> = answers.iter().map(|a| Fe::from(a.server)).collect();
    let base = &xs[..t + 1];
    let w0 = lagrange_weights_at_zero(base).expect("distinct abscissas");
    // Weights predicting each remaining answer from the first t+1.
    let checks: Vec<Vec<Fe>> = xs[t + 1..]
        .iter()
        .map(|&x| {
            let shifted: Vec<Fe> = base.iter().map(|&b| b - x).collect();
            lagrange_weights_at_zero(&shifted).expect("distinct abscissas")
        })
        .collect();

    let mut faulty = BTreeSet::new();
    let mut words = Vec::with_capacity(wpr);
    let mut failed = false;
    for w in 0..wpr {
        let ys: Vec<Fe> = answers.iter().map(|a| a.words[w]).collect();
        let consistent = checks
            .iter()
            .zip(&ys[t + 1..])
            .all(|(c, &y)| c.iter().zip(&ys[..t + 1]).map(|(&l, &v)| l * v).sum::<Fe>() == y);
        if consistent {
            words.push(w0.iter().zip(&ys).map(|(&l, &v)| l * v).sum::<Fe>());
            continue;
        }
        let points: Vec<EvaluationPoint<{ crate::galois::MODULUS }>> =
            xs.iter().zip(&ys).map(|(&x, &y)| EvaluationPoint { x, y }).collect();
        match berlekamp_welch_decode(&points, t, e_max) {
            Ok(d) => {
                faulty.extend(d.error_positions.iter().map(|&i| answers[i].server));
                words.push(d.poly.eval(Fe::ZERO));
            }
            Err(_) => {
                failed = true;
                words.push(Fe::ZERO);
            }
        }
    }
    if failed || faulty.len() > e_max || words.iter().any(|w| w.value() > 0xFFFF) {
        return Err(MultiError::Unrecoverable { suspects: faulty });
    }
    let mut record = Vec::with_capacity(2 * wpr);
    for w in &words {
        record.extend_from_slice(&(w.value() as u16).to_be_bytes());
    }
    record.truncate(state.record_len);
    let honest = seen.difference(&faulty).copied().collect();
    Ok(ReconstructResult { record, honest, faulty })
}

/// Ways a Byzantine server can corrupt its answer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Corruption {
    /// Every word replaced by a random field element.
    RandomWords,
    /// One word shifted by a random nonzero amount.
    OneWord,
    /// Every word shifted by the same nonzero constant.
    AddConstant,
    /// Every word multiplied by a constant other than one.
    Scale,
    /// Answer computed over a database with one record altered.
    WrongRecord,
}

impl Corruption {
    pub const ALL: [Corruption; 5] = [
        Corruption::RandomWords,
        Corruption::OneWord,
        Corruption::AddConstant,
        Corruption::Scale,
        Corruption::WrongRecord,
    ];

    /// Strategies that alter every word.
    pub const TOTAL: [Corruption; 2] = [Corruption::RandomWords, Corruption::AddConstant];
}

fn nonzero<R: Rng + ?Sized>(rng: &mut R) -> Fe {
    Fe::new(rng.random_range(1..u64::from(crate::galois::MODULUS)))
}

/// Corrupts `answer` (computed honestly for `query`). The result always
/// differs from the honest answer.
pub fn corrupt<R: Rng + ?Sized>(answer: &mut MultiAnswer, query: &MultiQuery, how: Corruption, rng: &mut R) {
    let honest = answer.words.clone();
    match how {
        Corruption::RandomWords => answer.words.iter_mut().for_each(|w| *w = Fe::random(rng)),
        Corruption::OneWord => {
            if !answer.words.is_empty() {
                let i = rng.random_range(0..answer.words.len());
                answer.words[i] += nonzero(rng);
            }
        }
        Corruption::AddConstant => {
            let c = nonzero(rng);
            answer.words.iter_mut().for_each(|w| *w += c);
        }
        Corruption::Scale => {
            let c = Fe::new(rng.random_range(2..u64::from(crate::galois::MODULUS)));
            answer.words.iter_mut().for_each(|w| *w *= c);
        }
        Corruption::WrongRecord => {
            // Adding share_j · delta for some record j and random word delta.
            if let Some(j) = (!query.shares.is_empty()).then(|| rng.random_range(0..query.shares.len())) {
                let s = query.shares[j];
                for w in answer.words.iter_mut() {
                    *w += s * Fe::new(rng.random_range(0..=0xFFFF));
                }
            }
        }
    }
    if answer.words == honest && !answer.words.is_empty() {
        answer.words[0] += Fe::ONE;
    }
}
