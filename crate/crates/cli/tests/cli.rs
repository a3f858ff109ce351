use std::path::PathBuf;
use std::process::{Command, Output};

fn pirdsn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pirdsn")).args(args).output().expect("binary runs")
}

fn scenario(name: &str) -> String {
    let p: PathBuf = [env!("CARGO_MANIFEST_DIR"), "..", "..", "scenarios", name].iter().collect();
    p.to_string_lossy().into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn honest_baseline_recovers_every_live_file() {
    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("rows.csv");
    let o = pirdsn(&["sim", &scenario("honest_baseline.toml"), "--out", csv_path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let mut rdr = csv::Reader::from_path(&csv_path).unwrap();
    let headers = rdr.headers().unwrap().clone();
    assert_eq!(
        headers.iter().collect::<Vec<_>>(),
        ["operation", "mode", "n", "record_len", "latency_ticks", "wall_ms", "hash_count", "outcome"]
    );
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    let retrievals: Vec<_> = rows.iter().filter(|r| &r[0] == "retrieve").collect();
    assert!(!retrievals.is_empty());
    for r in retrievals {
        assert!(["recovered", "robust-recovered", "absent"].contains(&&r[7]), "{r:?}");
    }
    assert!(rows.iter().any(|r| &r[1] == "mpir") && rows.iter().any(|r| &r[1] == "spir"));
}

#[test]
fn attack_matrix_detects_everything() {
    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("rows.csv");
    let o = pirdsn(&["sim", &scenario("attack_matrix.toml"), "-o", csv_path.to_str().unwrap()]);
    let out = stdout(&o);
    assert_eq!(o.status.code(), Some(0), "{out}");
    let attack_lines: Vec<&str> = out.lines().filter(|l| l.starts_with("attack ")).collect();
    assert!(attack_lines.len() >= 8, "{out}");
    for l in attack_lines {
        let (d, a) = l.rsplit_once(": ").unwrap().1.trim_end_matches(" detected").split_once('/').unwrap();
        assert_eq!(d, a, "{l}");
    }
    let csv_text = std::fs::read_to_string(&csv_path).unwrap();
    assert!(csv_text.contains("rejected-forgery") && csv_text.contains("integrity-failure"));
}

#[test]
fn seed_override_and_trace_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let t1 = dir.path().join("t1.log");
    let t2 = dir.path().join("t2.log");
    let a = pirdsn(&["sim", &scenario("honest_baseline.toml"), "--seed", "5", "--trace", t1.to_str().unwrap()]);
    let b = pirdsn(&["sim", &scenario("honest_baseline.toml"), "--seed", "5", "--trace", t2.to_str().unwrap()]);
    assert_eq!(stdout(&a), stdout(&b));
    assert_eq!(std::fs::read(&t1).unwrap(), std::fs::read(&t2).unwrap());
    assert!(stdout(&a).contains("seed 5"));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(pirdsn(&["sim", "/definitely/missing.toml"]).status.code(), Some(2));
    assert_eq!(pirdsn(&["bench", "-n", "5000"]).status.code(), Some(2));
    assert_eq!(pirdsn(&["no-such-command"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(
        &bad,
        "seed = 1\n[[subnets]]\nstrategies = [\"mutate-index\", \"fake-delete\", \"honest\", \"honest\"]\n",
    )
    .unwrap();
    let o = pirdsn(&["sim", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("exceed"));
}

#[test]
fn failed_checks_exit_one() {
    // Too few ticks to finish: the run is reported as incomplete.
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("short.toml");
    let text = "max_ticks = 5\n".to_string() + &std::fs::read_to_string(scenario("honest_baseline.toml")).unwrap();
    std::fs::write(&p, text).unwrap();
    let o = pirdsn(&["sim", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", stdout(&o));
    assert!(stdout(&o).contains("result FAIL"));
}

#[test]
fn aca_demo_places_sixth_fid_at_six() {
    let o = pirdsn(&["aca-demo"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(
        out.contains("insert FID6") && out.lines().any(|l| l.contains("insert FID6") && l.contains("-> index 6")),
        "{out}"
    );
    assert!(!out.contains("REJECTED"));

    let o = pirdsn(&["aca-demo", &scenario("aca_demo.toml")]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    // FID7 refills the leaf FID2 vacated.
    assert!(out.lines().any(|l| l.contains("insert FID7") && l.contains("-> index 2")), "{out}");
    assert_eq!(out.matches("verified").count(), 9);
}

#[test]
fn bench_touches_every_record_once() {
    for mode in ["spir", "mpir"] {
        let o = pirdsn(&["bench", "--mode", mode, "-n", "16,32,64", "--record-len", "64", "--trials", "2"]);
        assert_eq!(o.status.code(), Some(0));
        let mut rdr = csv::Reader::from_reader(o.stdout.as_slice());
        let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
        assert_eq!(rows.len(), 3);
        for r in rows {
            assert_eq!(&r[0], mode);
            assert_eq!(r[1], r[6], "touches must equal n");
        }
    }
}
