//! `pirdsn` command line: run scenarios, replay accumulator operations, and
//! time PIR answers.
//!
//! Exit codes: 0 success, 1 a run finished but a check failed, 2 usage or
//! input error.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};

mod bench;
mod demo;

#[derive(Parser)]
#[command(name = "pirdsn", version, about = "Verifiable index mapping and private retrieval for decentralized storage")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario file and print a summary.
    Sim {
        scenario: PathBuf,
        /// Override the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Write one CSV row per completed operation.
        #[arg(long, short)]
        out: Option<PathBuf>,
        /// Write the full event trace, one line per event.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Replay insert/delete operations on an accumulator, printing each proof
    /// and its verification. Without a file, runs the six-upload example.
    AcaDemo { ops: Option<PathBuf> },
    /// Time PIR answers over random databases and print CSV.
    Bench {
        #[arg(long, value_enum, default_value_t = BenchMode::Spir)]
        mode: BenchMode,
        /// Database sizes, comma separated.
        #[arg(long, short, value_delimiter = ',', default_values_t = vec![64, 128, 256, 512])]
        n: Vec<u64>,
        #[arg(long, default_value_t = 1024)]
        record_len: usize,
        #[arg(long, default_value_t = 5)]
        trials: usize,
        /// Use the unencrypted SPIR backend (testing only).
        #[arg(long)]
        insecure_plain: bool,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BenchMode {
    Spir,
    Mpir,
}

/// A failure with the exit code it maps to.
pub struct Failure {
    code: u8,
    err: anyhow::Error,
}

impl Failure {
    pub fn usage(err: impl Into<anyhow::Error>) -> Self {
        Self { code: 2, err: err.into() }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(err: anyhow::Error) -> Self {
        Self { code: 2, err }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let res = match cli.cmd {
        Cmd::Sim { scenario, seed, out, trace } => cmd_sim(scenario, seed, out, trace),
        Cmd::AcaDemo { ops } => demo::run(ops.as_deref()),
        Cmd::Bench { mode, n, record_len, trials, insecure_plain, seed, out } => {
            bench::run(&bench::Options { mode, sizes: n, record_len, trials, insecure_plain, seed }, out.as_deref())
        }
    };
    match res {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}

fn cmd_sim(path: PathBuf, seed: Option<u64>, out: Option<PathBuf>, trace: Option<PathBuf>) -> Result<u8, Failure> {
    let mut scenario =
        pirdsn::Scenario::load(&path).map_err(|e| Failure::usage(anyhow::anyhow!("{}: {e}", path.display())))?;
    if let Some(s) = seed {
        scenario.seed = s;
    }
    let run = pirdsn::sim::run_traced(&scenario, trace.is_some()).map_err(Failure::usage)?;
    let report = run.report;
    if let Some(p) = &out {
        write_rows(p, &report.rows).with_context(|| format!("writing {}", p.display()))?;
    }
    if let (Some(p), Some(lines)) = (&trace, run.trace) {
        let mut text = lines.join("\n");
        text.push('\n');
        std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
    }
    print!("{}", report.summary());
    for (k, v) in &report.final_digests {
        println!("digest {k} {v}");
    }
    Ok(if report.passed() { 0 } else { 1 })
}

pub fn write_rows<T: serde::Serialize>(path: &std::path::Path, rows: &[T]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
