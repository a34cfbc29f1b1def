use std::process::Command;

use closet_service::{AppState, ServiceConfig};

fn bench() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_closet-bench"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> String {
    let out = bench().args(args).output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn sweep_writes_one_row_per_size_and_kind() {
    let csv = run(&["sweep", "--sizes", "1000,3000", "--dim", "16", "--queries", "50", "--seed", "4"]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "size,kind,mean_us,p99_us");
    assert_eq!(lines.len(), 1 + 2 * 4);
    let kinds: Vec<&str> = lines[1..].iter().map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(kinds, ["FLAT", "IVF", "HNSW", "FOREST", "FLAT", "IVF", "HNSW", "FOREST"]);
    for l in &lines[1..] {
        let f: Vec<f64> = l.split(',').skip(2).map(|x| x.parse().unwrap()).collect();
        assert!(f[0] > 0.0 && f[1] >= f[0] * 0.5);
    }
}

#[test]
fn table_reports_recall_and_memory() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.csv");
    let args = ["table", "--size", "5000", "--dim", "16", "--queries", "100", "--seed", "2", "--out", path.to_str().unwrap()];
    run(&args);
    let first = std::fs::read_to_string(&path).unwrap();
    let rows: Vec<Vec<String>> = first.lines().skip(1).map(|l| l.split(',').map(str::to_owned).collect()).collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0][0], "FLAT");
    assert_eq!(rows[0][2], "1.0");
    let flat_bytes: usize = rows[0][3].parse().unwrap();
    for r in &rows[1..] {
        assert!(r[3].parse::<usize>().unwrap() > flat_bytes, "{} adds structure", r[0]);
    }
    run(&args);
    let second = std::fs::read_to_string(&path).unwrap();
    let strip = |t: &str| t.lines().map(|l| l.split(',').enumerate().filter(|(i, _)| *i != 1).map(|x| x.1).collect::<Vec<_>>().join(",")).collect::<Vec<_>>();
    assert_eq!(strip(&first), strip(&second), "non-timing columns reproduce");
}

#[test]
fn train_demo_passes_and_reproduces() {
    let (a, b) = std::thread::scope(|s| {
        let a = s.spawn(|| run(&["train-demo"]));
        let b = s.spawn(|| run(&["train-demo"]));
        (a.join().unwrap(), b.join().unwrap())
    });
    assert_eq!(a, b);
    assert!(a.contains("PASS final/initial loss ratio"), "{a}");
    assert!(!a.contains("FAIL"), "{a}");
    assert_eq!(a.matches("OUT slot(s)").count(), 3);
}

#[test]
fn demo_data_is_servable() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("demo");
    let printed = run(&["demo-data", "--out", out.to_str().unwrap(), "--seed", "5"]);
    let cfg = ServiceConfig::from_file(std::path::Path::new(printed.trim())).unwrap();
    let state = AppState::load(&cfg).unwrap();
    assert_eq!(state.catalog.len(), 20 * 10 * 6);
    assert!(state.texts.contains_key("colorful-top"));
    assert!(out.join("index.kkix").is_file());
    assert!(out.join("transformer.kktf").is_file());
}
