//! Answer-time measurements over random databases.

use std::path::Path;
use std::time::Instant;

use anyhow::anyhow;
use pirdsn::db::Database;
use pirdsn::pir_multi::{m_answer, m_query};
use pirdsn::pir_single::{s_answer, s_query};
use pirdsn::sim::linear_fit;
use pirdsn::SpirParams;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::{BenchMode, Failure};

pub const MAX_DB_SIZE: u64 = 4096;
/// Subnet size and privacy threshold for the multi-server bench.
const SERVERS: usize = 4;
const THRESHOLD: usize = 1;

pub struct Options {
    pub mode: BenchMode,
    pub sizes: Vec<u64>,
    pub record_len: usize,
    pub trials: usize,
    pub insecure_plain: bool,
    pub seed: u64,
}

#[derive(Debug, Serialize)]
pub struct BenchRow {
    pub mode: &'static str,
    pub n: u64,
    pub record_len: usize,
    pub trials: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    /// Records read per answer, per miner.
    pub record_touches: u64,
}

fn random_db(n: u64, record_len: usize, rng: &mut ChaCha8Rng) -> Database {
    let mut db = Database::new(n, record_len);
    for i in 1..=n {
        let rec: Vec<u8> = (0..record_len).map(|_| rng.random()).collect();
        db.put(i, &rec).expect("index in range");
    }
    db
}

pub fn measure(o: &Options) -> anyhow::Result<Vec<BenchRow>> {
    let params = if o.insecure_plain { SpirParams::plain_insecure() } else { SpirParams::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(o.seed);
    let mut rows = Vec::new();
    for &n in &o.sizes {
        let db = random_db(n, o.record_len, &mut rng);
        let mut times = Vec::with_capacity(o.trials);
        let mut touches = Vec::with_capacity(o.trials);
        for _ in 0..o.trials {
            let index = rng.random_range(1..=n);
            db.reset_touches();
            let elapsed = match o.mode {
                BenchMode::Spir => {
                    let (_, q) = s_query(index, n, o.record_len, 0, &params, &mut rng)?;
                    let t0 = Instant::now();
                    std::hint::black_box(s_answer(&db, &q)?);
                    t0.elapsed()
                }
                BenchMode::Mpir => {
                    // One miner's share of the work.
                    let (_, qs) = m_query(index, n, o.record_len, 0, SERVERS, THRESHOLD, &mut rng)?;
                    let t0 = Instant::now();
                    std::hint::black_box(m_answer(&db, &qs[0])?);
                    t0.elapsed()
                }
            };
            times.push(elapsed.as_secs_f64() * 1e3);
            touches.push(db.touch_count());
        }
        let mean = times.iter().sum::<f64>() / times.len() as f64;
        times.sort_by(f64::total_cmp);
        if touches.iter().any(|&t| t != touches[0]) {
            return Err(anyhow!("touch count varies between trials at n = {n}"));
        }
        rows.push(BenchRow {
            mode: match o.mode {
                BenchMode::Spir => "spir",
                BenchMode::Mpir => "mpir",
            },
            n,
            record_len: o.record_len,
            trials: o.trials,
            mean_ms: mean,
            median_ms: times[times.len() / 2],
            record_touches: touches[0],
        });
    }
    Ok(rows)
}

pub fn run(o: &Options, out: Option<&Path>) -> Result<u8, Failure> {
    if o.sizes.is_empty() || o.sizes.iter().any(|&n| n == 0 || n > MAX_DB_SIZE) {
        return Err(Failure::usage(anyhow!("each n must lie in 1..={MAX_DB_SIZE}")));
    }
    if o.trials == 0 || o.record_len == 0 || o.record_len > 1 << 16 {
        return Err(Failure::usage(anyhow!("trials must be positive and record_len in 1..=65536")));
    }
    let rows = measure(o).map_err(Failure::usage)?;
    match out {
        Some(p) => crate::write_rows(p, &rows)?,
        None => {
            let mut w = csv::Writer::from_writer(std::io::stdout());
            for r in &rows {
                w.serialize(r).map_err(anyhow::Error::from)?;
            }
            w.flush().map_err(anyhow::Error::from)?;
        }
    }
    let linear_touches = rows.iter().all(|r| r.record_touches == r.n);
    if rows.len() >= 3 {
        let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.n as f64, r.median_ms)).collect();
        let (slope, intercept, r2) = linear_fit(&pts);
        eprintln!("fit: median_ms = {slope:.6} * n + {intercept:.4}  (R^2 = {r2:.4})");
    }
    eprintln!("record touches equal n: {linear_touches}");
    Ok(if linear_touches { 0 } else { 1 })
}
