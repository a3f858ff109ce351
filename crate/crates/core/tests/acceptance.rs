//! Acceptance checks. Runs without the libtest harness and prints one
//! PASS/FAIL line per criterion; exits nonzero if any fails.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use pirdsn::attacks::{self, Attack};
use pirdsn::client::{self, mpir_finish, mpir_start, retrieve_spir};
use pirdsn::db::Database;
use pirdsn::hash;
use pirdsn::node::MinerConfig;
use pirdsn::pir_multi::{corrupt, m_answer};
use pirdsn::pir_single::{hint, s_answer, s_decrypt, s_query};
use pirdsn::proofs::verify_proof;
use pirdsn::sim::{self, linear_fit, spir_answer_latency};
use pirdsn::smr::max_faulty;
use pirdsn::{
    AcaState, Corruption, Fid, Ledger, MinerStore, Mode, Outcome, ProofChain, Scenario, SpirMiner, SpirParams, Strategy,
};
use rand::seq::IteratorRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Check + 'a>);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn fid(seed: u64, i: u64) -> Fid {
    Fid::of(format!("{seed}:{i}").as_bytes())
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

/// Slot array laid out largest tree first; inserts take the first vacant slot
/// and a full array doubles by adding a bigger tree in front.
struct Flat {
    m: usize,
    slots: Vec<Option<Fid>>,
    vacant: BTreeSet<usize>,
    at: HashMap<Fid, usize>,
    live_in: Vec<usize>,
}

impl Flat {
    fn new() -> Self {
        Self { m: 1, slots: vec![None], vacant: BTreeSet::from([0]), at: HashMap::new(), live_in: vec![0] }
    }

    fn tree_of(&self, s: usize) -> usize {
        let mut start = 0;
        for k in (0..self.m).rev() {
            if s < start + (1 << k) {
                return k;
            }
            start += 1 << k;
        }
        unreachable!("slot out of range")
    }

    fn insert(&mut self, f: Fid) -> u64 {
        let s = match self.vacant.pop_first() {
            Some(s) => s,
            None => {
                self.m += 1;
                let half = 1 << (self.m - 1);
                self.slots.resize((1 << self.m) - 1, None);
                self.vacant.extend(half..(1 << self.m) - 1);
                self.live_in = vec![0; self.m];
                self.live_in[self.m - 1] = half - 1;
                half - 1
            }
        };
        self.slots[s] = Some(f);
        self.at.insert(f, s);
        let k = self.tree_of(s);
        self.live_in[k] += 1;
        self.index_at(s)
    }

    fn delete(&mut self, f: &Fid) {
        let s = self.at.remove(f).expect("live");
        self.slots[s] = None;
        self.vacant.insert(s);
        let k = self.tree_of(s);
        self.live_in[k] -= 1;
    }

    fn index_at(&self, s: usize) -> u64 {
        let k = self.tree_of(s);
        let skipped: usize = ((k + 1)..self.m).filter(|&i| self.live_in[i] == 0).map(|i| 1 << i).sum();
        (s - skipped + 1) as u64
    }

    fn all(&self) -> BTreeMap<Fid, u64> {
        self.at.iter().map(|(f, &s)| (*f, self.index_at(s))).collect()
    }
}

fn aca_oracle() -> Check {
    let t0 = Instant::now();
    let (seeds, ops_per_seed, cap) = (20u64, 10_000, 4096);
    let mut checked = 0u64;
    for seed in 0..seeds {
        let mut r = rng(seed);
        let mut state = AcaState::new();
        let mut flat = Flat::new();
        let mut live: Vec<Fid> = Vec::new();
        for op in 0..ops_per_seed {
            let grow = if live.len() >= cap { false } else { live.is_empty() || r.random_bool(0.6) };
            if grow {
                let f = fid(seed, op);
                let a = state.insert(f).map_err(|e| format!("insert: {e}"))?;
                let want = flat.insert(f);
                ensure(a.index == want, || format!("seed {seed} op {op}: index {} != oracle {want}", a.index))?;
                let recomputed = pirdsn::aca::compute_index(&state.roots(), a.tree_index, &a.witness);
                ensure(recomputed == Ok(want), || format!("seed {seed} op {op}: witness gives {recomputed:?}"))?;
                live.push(f);
            } else {
                let f = live.swap_remove(r.random_range(0..live.len()));
                state.delete(&f).map_err(|e| format!("delete: {e}"))?;
                flat.delete(&f);
            }
            if op % 1000 == 999 || op + 1 == ops_per_seed {
                let got: BTreeMap<Fid, u64> = state.indexed_fids().into_iter().map(|(i, f)| (f, i)).collect();
                ensure(got == flat.all(), || format!("seed {seed} op {op}: index map differs from oracle"))?;
                checked += got.len() as u64;
            }
        }
    }

    let mut s = AcaState::new();
    for i in 1..=6 {
        s.insert(Fid::of(format!("FID{i}").as_bytes())).map_err(|e| e.to_string())?;
    }
    let six = s.index_of(&Fid::of(b"FID6"));
    ensure(six == Some(6), || format!("worked example gives {six:?}"))?;

    let el = t0.elapsed();
    ensure(el < Duration::from_secs(60), || format!("took {}", secs(el)))?;
    Ok(format!(
        "{} ops over {seeds} seeds, {checked} index checks, worked example 6, {}",
        seeds * ops_per_seed,
        secs(el)
    ))
}

fn public_verifiability() -> Check {
    let t0 = Instant::now();
    let mut r = rng(100);
    let mut forged: BTreeMap<Attack, (u64, u64)> = BTreeMap::new();
    let mut honest = 0u64;
    let mut false_rejects = 0u64;

    // Random honest walks published to a ledger; before each honest step
    // every attack is tried against the current head.
    let mut walk = 0u64;
    let mut ledger = Ledger::new();
    while honest < 10_000 || forged.values().any(|&(n, _)| n < 200) || forged.len() < Attack::ALL.len() {
        walk += 1;
        let mut state = AcaState::new();
        let chain = walk as u32;
        let mut live: Vec<Fid> = Vec::new();
        let steps = r.random_range(20..400);
        for step in 0..steps {
            let fresh = fid(walk, step);
            if !live.is_empty() && r.random_bool(0.5) {
                for attack in Attack::ALL {
                    let target =
                        if attack.is_deletion() { *live.iter().choose(&mut r).expect("nonempty") } else { fresh };
                    if let Some(p) = attacks::forge(attack, &state, target, ledger.head(chain), &mut r) {
                        let e = forged.entry(attack).or_default();
                        e.0 += 1;
                        if ledger.check(chain, &p).is_ok() {
                            e.1 += 1;
                        }
                    }
                }
            }
            let upload = live.is_empty() || r.random_bool(0.6);
            let target = if upload { fresh } else { live.swap_remove(r.random_range(0..live.len())) };
            let p = attacks::honest(&mut state, upload, target, ledger.head(chain)).ok_or("honest proof")?;
            if upload {
                live.push(target);
            }
            honest += 1;
            if ledger.append(chain, p).is_err() {
                false_rejects += 1;
            }
        }
    }

    let accepts: u64 = forged.values().map(|x| x.1).sum();
    let counts: Vec<String> = forged.iter().map(|(a, (n, _))| format!("{}:{n}", a.label())).collect();
    ensure(accepts == 0, || format!("{accepts} forged proofs accepted ({})", counts.join(" ")))?;
    ensure(false_rejects == 0, || format!("{false_rejects} of {honest} honest proofs rejected"))?;
    let el = t0.elapsed();
    ensure(el < Duration::from_secs(120), || format!("took {}", secs(el)))?;
    Ok(format!("0 false accepts [{}], 0 false rejects over {honest} honest, {}", counts.join(" "), secs(el)))
}

fn log_verification() -> Check {
    let mut r = rng(200);
    let mut worst = Vec::new();
    for e in 4..=12u32 {
        let n = 1usize << e;
        let bound = 8 * u64::from(e) + 16;
        let mut state = AcaState::new();
        let mut chain = ProofChain::new(e);
        let mut live = Vec::new();
        for i in 0..n as u64 {
            let p = attacks::honest(&mut state, true, fid(u64::from(e), i), chain.head()).ok_or("upload")?;
            chain.extend(&p).map_err(|x| x.to_string())?;
            live.push(p.fid());
        }
        let mut max = 0;
        for j in 0..100u64 {
            let upload = j % 2 == 1;
            let target =
                if upload { fid(u64::from(e), n as u64 + j) } else { live.swap_remove(r.random_range(0..live.len())) };
            let p = attacks::honest(&mut state, upload, target, chain.head()).ok_or("honest proof")?;
            let (verdict, hashes) = hash::count(|| verify_proof(&p, &chain));
            verdict.map_err(|x| x.to_string())?;
            max = max.max(hashes);
            chain.extend(&p).map_err(|x| x.to_string())?;
            if upload {
                live.push(target);
            }
        }
        ensure(max <= bound, || format!("n={n}: {max} hashes > {bound}"))?;
        worst.push(format!("{n}:{max}/{bound}"));
    }
    Ok(format!("max hashes per verification {}", worst.join(" ")))
}

fn random_db(n: u64, record_len: usize, r: &mut impl Rng) -> Database {
    let mut db = Database::new(n, record_len);
    for i in 1..=n {
        let rec: Vec<u8> = (0..record_len).map(|_| r.random()).collect();
        db.put(i, &rec).expect("in range");
    }
    db
}

fn spir_correctness() -> Check {
    let t0 = Instant::now();
    let params = SpirParams::default();
    let mut r = rng(300);
    let mut swept = 0;
    for n in [7u64, 63, 255] {
        let db = random_db(n, 1024, &mut r);
        let h = hint(&db, &params);
        for i in 1..=n {
            let (st, q) = s_query(i, n, 1024, db.version(), &params, &mut r).map_err(|e| e.to_string())?;
            let a = s_answer(&db, &q).map_err(|e| e.to_string())?;
            let rec = s_decrypt(&st, &a, Some(&h)).map_err(|e| format!("n={n} i={i}: {e}"))?;
            ensure(rec == db.record(i).expect("in range"), || format!("n={n} i={i}: wrong record"))?;
            swept += 1;
        }
    }

    let mut ledger = Ledger::new();
    let mut miner = SpirMiner::new(MinerConfig {
        id: 0,
        mode: Mode::Spir,
        strategy: Strategy::CorruptPirAnswer,
        record_len: 1024,
        spir: params,
        seed: 301,
    });
    let mut files = Vec::new();
    for i in 0..40 {
        let len = r.random_range(1..1000);
        let bytes: Vec<u8> = (0..len).map(|_| r.random()).collect();
        let f = client::upload(&bytes, &mut miner, &mut ledger).map_err(|e| format!("upload {i}: {e}"))?;
        files.push((f, bytes));
    }
    let (mut detected, mut silent) = (0, 0);
    for _ in 0..100 {
        let (f, bytes) = &files[r.random_range(0..files.len())];
        let rep = retrieve_spir(*f, &ledger, &mut miner, &mut r);
        if rep.outcome == Outcome::IntegrityFailure {
            detected += 1;
        }
        if rep.outcome.is_success() && rep.bytes.as_deref() != Some(bytes.as_slice()) {
            silent += 1;
        }
    }
    ensure(detected >= 99, || format!("tampering detected in {detected}/100"))?;
    ensure(silent == 0, || format!("{silent} tampered answers accepted"))?;
    let el = t0.elapsed();
    ensure(el < Duration::from_secs(300), || format!("took {}", secs(el)))?;
    Ok(format!("{swept}/{swept} indexes match, tampering detected {detected}/100, silent 0, {}", secs(el)))
}

const SUBNET: u32 = 1000;

fn mpir_fixture(r: &mut ChaCha8Rng) -> Result<(Ledger, MinerStore, Vec<(Fid, Vec<u8>)>), String> {
    let mut ledger = Ledger::new();
    ledger.register_chain(SUBNET, [0, 1, 2, 3]);
    let mut store = MinerStore::new(256);
    let mut files = Vec::new();
    for _ in 0..24 {
        let len = r.random_range(1..250);
        let bytes: Vec<u8> = (0..len).map(|_| r.random()).collect();
        let f = Fid::of(&bytes);
        let p = store.upload(f, &bytes, ledger.head(SUBNET)).map_err(|e| e.to_string())?;
        ledger.append(SUBNET, p).map_err(|e| e.to_string())?;
        files.push((f, bytes));
    }
    Ok((ledger, store, files))
}

fn mpir_robustness() -> Check {
    let mut r = rng(400);
    let (ledger, store, files) = mpir_fixture(&mut r)?;
    let db = store.database().clone();
    let mut by_corruption: BTreeMap<String, u32> = BTreeMap::new();

    for trial in 0..100 {
        let (f, bytes) = &files[r.random_range(0..files.len())];
        let (ret, queries) = mpir_start(*f, &ledger, 256, &mut r).map_err(|_| "absent".to_string())?;
        let bad = r.random_range(0..4u32);
        let how = Corruption::ALL[r.random_range(0..Corruption::ALL.len())];
        *by_corruption.entry(format!("{how:?}")).or_default() += 1;
        let mut answers = Vec::new();
        for (id, q) in queries {
            let mut a = m_answer(&db, &q).map_err(|e| e.to_string())?;
            if id == bad {
                corrupt(&mut a, &q, how, &mut r);
            }
            answers.push((id, a));
        }
        let rep = mpir_finish(ret, answers);
        ensure(rep.outcome == Outcome::RobustRecovered { faulty: BTreeSet::from([bad]) }, || {
            format!("trial {trial} ({how:?} by {bad}): {:?}", rep.outcome)
        })?;
        ensure(rep.bytes.as_deref() == Some(bytes.as_slice()), || format!("trial {trial}: wrong bytes"))?;
    }

    for trial in 0..100 {
        let (f, _) = &files[r.random_range(0..files.len())];
        let (ret, queries) = mpir_start(*f, &ledger, 256, &mut r).map_err(|_| "absent".to_string())?;
        let bad: BTreeSet<u32> = (0..4u32).choose_multiple(&mut r, 2).into_iter().collect();
        let mut answers = Vec::new();
        for (id, q) in queries {
            let mut a = m_answer(&db, &q).map_err(|e| e.to_string())?;
            if bad.contains(&id) {
                let how = Corruption::ALL[r.random_range(0..Corruption::ALL.len())];
                corrupt(&mut a, &q, how, &mut r);
            }
            answers.push((id, a));
        }
        let rep = mpir_finish(ret, answers);
        ensure(matches!(rep.outcome, Outcome::Unrecoverable { .. }), || {
            format!("negative control trial {trial} ({bad:?}): {:?}", rep.outcome)
        })?;
    }
    let mix: Vec<String> = by_corruption.iter().map(|(k, v)| format!("{k}:{v}")).collect();
    Ok(format!("100/100 recovered with exact faulty set [{}], 2-of-4 unrecoverable 100/100", mix.join(" ")))
}

fn robustness_inequality() -> Check {
    for n in 1..=1000u64 {
        let nf = n as f64;
        ensure((2.0 * nf + 1.0) / 3.0 > (nf * (nf - 1.0) / 3.0).sqrt(), || format!("float check fails at N={n}"))?;
        // Squared and scaled by 9: (2N+1)^2 > 3N(N-1).
        ensure((2 * n + 1).pow(2) > 3 * n * (n - 1), || format!("integer check fails at N={n}"))?;
        // With c = f faulty of k = N answers and threshold t = f, at least
        // h = N - f honest answers must exceed sqrt(k t).
        let f = max_faulty(n as usize) as u64;
        ensure((n - f).pow(2) > n * f, || format!("h > sqrt(kc) fails at N={n}"))?;
    }
    Ok("holds for N in 1..=1000 (float, exact and h = N - f forms)".into())
}

fn adversarial_scenario(seed: u64) -> Scenario {
    let byz = [
        "conflict-index",
        "wrong-vacant-index",
        "delete-wrong-fid",
        "fake-delete",
        "mutate-index",
        "corrupt-pir-answer",
        "silent-leader",
    ][seed as usize % 7];
    let pos = (seed / 7) as usize % 4;
    let mut roles = ["\"honest\""; 4];
    let quoted = format!("\"{byz}\"");
    roles[pos] = &quoted;
    let text = format!(
        r#"
name = "smr-{seed}"
seed = {seed}
[network]
delay_min = 1
delay_max = {dmax}
byzantine_drop_rate = 0.2
[smr]
view_timeout = {timeout}
[[subnets]]
strategies = [{roles}]
[workload]
clients = 3
files = 12
deletes = 4
retrievals = 6
file_size = [4, 48]
mpir_share = 1.0
"#,
        dmax = 2 + seed % 4,
        timeout = 8 * (2 + seed % 4) + 4,
        roles = roles.join(", "),
    );
    Scenario::from_toml(&text).expect("valid scenario")
}

struct SmrRuns {
    runs: Vec<(u64, sim::SimReport)>,
}

fn smr_runs() -> Result<SmrRuns, String> {
    let mut runs = Vec::new();
    for seed in 1..=56u64 {
        let s = adversarial_scenario(seed);
        runs.push((seed, sim::run(&s).map_err(|e| format!("seed {seed}: {e}"))?));
    }
    Ok(SmrRuns { runs })
}

fn smr_safety(runs: &SmrRuns) -> Check {
    let mut view_changes = 0;
    let mut with_vc = 0;
    for (seed, rep) in &runs.runs {
        ensure(rep.completed, || format!("seed {seed}: did not finish"))?;
        ensure(rep.divergences == 0, || format!("seed {seed}: {} divergences", rep.divergences))?;
        ensure(rep.rejected_commits == 0, || format!("seed {seed}: {} rejected commits", rep.rejected_commits))?;
        ensure(rep.forged_commits == 0, || format!("seed {seed}: {} forged commits", rep.forged_commits))?;
        ensure(rep.halted_replicas == 0, || format!("seed {seed}: {} halted", rep.halted_replicas))?;
        ensure(rep.net.conserved, || format!("seed {seed}: message accounting broken"))?;
        view_changes += rep.view_changes;
        with_vc += u64::from(rep.view_changes > 0);
    }
    ensure(with_vc > 0, || "no schedule exercised a view change".into())?;
    Ok(format!(
        "{} schedules, 0 divergences, 0 bad commits, {view_changes} view changes in {with_vc} runs",
        runs.runs.len()
    ))
}

fn smr_liveness(runs: &SmrRuns) -> Check {
    let bound = 3 * (1 + 1);
    let mut worst = 0;
    for (seed, rep) in &runs.runs {
        ensure(rep.unsatisfied.is_empty() && rep.satisfied == rep.requests, || {
            format!("seed {seed}: {}/{} satisfied {:?}", rep.satisfied, rep.requests, rep.unsatisfied)
        })?;
        ensure(rep.max_views_per_request <= bound, || {
            format!("seed {seed}: a request spanned {} views", rep.max_views_per_request)
        })?;
        worst = worst.max(rep.max_views_per_request);
    }
    Ok(format!("all requests committed, worst {worst} views (bound {bound})"))
}

fn retrieval_contract() -> Check {
    let mut r = rng(900);
    let params = SpirParams::default();
    for n in [1u64, 7, 64, 255, 1000] {
        let db = random_db(n, 128, &mut r);
        let (_, q) = s_query(r.random_range(1..=n), n, 128, 0, &params, &mut r).map_err(|e| e.to_string())?;
        db.reset_touches();
        s_answer(&db, &q).map_err(|e| e.to_string())?;
        ensure(db.touch_count() == n, || format!("spir n={n}: {} touches", db.touch_count()))?;
        let (_, qs) =
            pirdsn::pir_multi::m_query(r.random_range(1..=n), n, 128, 0, 4, 1, &mut r).map_err(|e| e.to_string())?;
        for q in &qs {
            db.reset_touches();
            m_answer(&db, q).map_err(|e| e.to_string())?;
            ensure(db.touch_count() == n, || format!("mpir n={n}: {} touches", db.touch_count()))?;
        }
    }

    let mut ledger = Ledger::new();
    let mut miner = SpirMiner::new(MinerConfig {
        id: 0,
        mode: Mode::Spir,
        strategy: Strategy::Honest,
        record_len: 256,
        spir: params.clone(),
        seed: 901,
    });
    let mut fids = Vec::new();
    for i in 0..20u32 {
        fids.push(client::upload(&i.to_le_bytes(), &mut miner, &mut ledger).map_err(|e| e.to_string())?);
    }
    for f in &fids {
        let rep = retrieve_spir(*f, &ledger, &mut miner, &mut r);
        ensure(rep.outcome == Outcome::Recovered && rep.pir_rounds == 1, || {
            format!("spir: {:?} in {} rounds", rep.outcome, rep.pir_rounds)
        })?;
    }
    let (ledger, store, files) = mpir_fixture(&mut r)?;
    for (f, _) in &files {
        let (ret, queries) = mpir_start(*f, &ledger, 256, &mut r).map_err(|_| "absent".to_string())?;
        let answers =
            queries.into_iter().map(|(id, q)| (id, m_answer(store.database(), &q).expect("answer"))).collect();
        let rep = mpir_finish(ret, answers);
        ensure(rep.outcome.is_success() && rep.pir_rounds == 1, || format!("mpir: {:?}", rep.outcome))?;
    }
    let base = Scenario::load(&scenario_path("honest_baseline.toml")).map_err(|e| e.to_string())?;
    let rep = sim::run(&base).map_err(|e| e.to_string())?;
    ensure(rep.max_pir_rounds == 1, || format!("simulated retrievals used {} rounds", rep.max_pir_rounds))?;

    let pts = spir_answer_latency(&[64, 128, 256, 512, 1024], 1024, 15, &params, 902);
    let xy: Vec<(f64, f64)> = pts.iter().map(|&(n, ms)| (n as f64, ms)).collect();
    let (slope, _, r2) = linear_fit(&xy);
    ensure(r2 > 0.9 && slope > 0.0, || format!("latency fit slope {slope:.5} R2 {r2:.4}"))?;
    Ok(format!("touches = db_size, 1 round per retrieval (both modes), SPIR latency R2 {r2:.4}"))
}

fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn end_to_end() -> Check {
    let t0 = Instant::now();
    let s = Scenario::load(&scenario_path("mixed_e2e.toml")).map_err(|e| e.to_string())?;
    let a = sim::run(&s).map_err(|e| e.to_string())?;
    let b = sim::run(&s).map_err(|e| e.to_string())?;
    ensure(a.passed(), || format!("first run failed:\n{}", a.summary()))?;
    ensure(b.passed(), || "second run failed".into())?;
    ensure(a.trace_digest == b.trace_digest, || "trace digests differ".into())?;
    let el = t0.elapsed();
    ensure(el < Duration::from_secs(300), || format!("took {}", secs(el)))?;
    let attacks: u64 = a.attacks.values().map(|x| x.attempted).sum();
    Ok(format!(
        "{}/{} requests, {} attack kinds ({attacks} attempts) all detected, digest {}, {}",
        a.satisfied,
        a.requests,
        a.attacks.len(),
        &a.trace_digest[..16],
        secs(el)
    ))
}

fn main() {
    let smr = catch_unwind(smr_runs);
    let smr_result = |f: fn(&SmrRuns) -> Check| -> Check {
        match &smr {
            Ok(Ok(runs)) => f(runs),
            Ok(Err(e)) => Err(e.clone()),
            Err(_) => Err("simulation panicked".into()),
        }
    };
    let criteria: Vec<Criterion> = vec![
        ("ACA oracle equivalence", Box::new(aca_oracle)),
        ("public verifiability", Box::new(public_verifiability)),
        ("logarithmic verification", Box::new(log_verification)),
        ("SPIR correctness", Box::new(spir_correctness)),
        ("MPIR robustness", Box::new(mpir_robustness)),
        ("robustness inequality", Box::new(robustness_inequality)),
        ("SMR safety and determinism", Box::new(|| smr_result(smr_safety))),
        ("SMR liveness", Box::new(|| smr_result(smr_liveness))),
        ("linear retrieval, single invocation", Box::new(retrieval_contract)),
        ("end-to-end scenario", Box::new(end_to_end)),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or(p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default())
        });
        match result {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
