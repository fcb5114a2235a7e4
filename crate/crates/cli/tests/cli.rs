use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use parastep::predictor::{load_weights, Activation, PredictorWeights};
use tempfile::TempDir;

fn parastep(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_parastep"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = parastep(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(args: &[&str]) -> i32 {
    parastep(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small model shared by every test in this binary.
fn weights() -> &'static str {
    static PATH: OnceLock<PathBuf> = OnceLock::new();
    let p = PATH.get_or_init(|| {
        let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli-model");
        ok(&["train", "--iterations", "200", "--seed", "5", "--out-dir", s(&dir)]);
        dir.join("weights.pswt")
    });
    s(p)
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    fs::read(dir.join(name)).unwrap_or_else(|e| panic!("{}: {e}", dir.join(name).display()))
}

#[test]
fn training_is_deterministic() {
    let t = TempDir::new().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    for d in [&a, &b] {
        ok(&[
            "train",
            "--dataset",
            "gauss8",
            "--seed",
            "42",
            "--iterations",
            "50",
            "--out-dir",
            s(d),
        ]);
    }
    assert_eq!(read(&a, "weights.pswt"), read(&b, "weights.pswt"));
    assert_eq!(read(&a, "loss.csv"), read(&b, "loss.csv"));
}

#[test]
fn zero_iterations_write_the_initialization() {
    let t = TempDir::new().unwrap();
    ok(&["train", "--iterations", "0", "--seed", "9", "--out-dir", s(t.path())]);
    let w = load_weights(t.path().join("weights.pswt")).unwrap();
    let init = PredictorWeights::init(2, 16, &[64, 64], Activation::Silu, 9).unwrap();
    assert!(w.bits_eq(&init));
}

#[test]
fn usage_and_config_errors_exit_with_two() {
    let t = TempDir::new().unwrap();
    let out = s(t.path());
    assert_eq!(code(&["train", "--dataset"]), 2);
    assert_eq!(code(&["train", "--dataset", "spiral", "--out-dir", out]), 2);
    assert_eq!(
        code(&[
            "generate",
            "--weights",
            weights(),
            "--strategy",
            "parastep",
            "-p",
            "4",
            "--warmup",
            "0",
            "--out-dir",
            out
        ]),
        2
    );
    assert_eq!(
        code(&[
            "generate",
            "--weights",
            &format!("{out}/missing.pswt"),
            "--out-dir",
            out
        ]),
        2
    );
    assert_eq!(
        code(&[
            "generate",
            "--weights",
            weights(),
            "--strategy",
            "batchstep",
            "--backend",
            "loopback",
            "--out-dir",
            out
        ]),
        2
    );
    assert_eq!(
        code(&["compare", "parastep:2", "--weights", weights(), "--out-dir", out]),
        2
    );
    let bad = t.path().join("bad.toml");
    fs::write(&bad, "degre = 3\n").unwrap();
    assert_eq!(code(&["commodel", "--config", s(&bad), "--out-dir", out]), 2);
    assert_eq!(code(&["bogus"]), 2);
}

#[test]
fn parastep_with_one_rank_matches_sequential_samples() {
    let t = TempDir::new().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    let common = ["--weights", weights(), "--samples", "4", "--seed", "3", "--warmup", "5"];
    ok(&[
        &["generate", "--strategy", "parastep", "-p", "1", "--out-dir", s(&a)][..],
        &common,
    ]
    .concat());
    ok(&[
        &["generate", "--strategy", "sequential", "--out-dir", s(&b)][..],
        &common,
    ]
    .concat());
    assert_eq!(read(&a, "samples.csv"), read(&b, "samples.csv"));
    assert_eq!(String::from_utf8(read(&a, "samples.csv")).unwrap().lines().count(), 5);
}

#[test]
fn batchstep_matches_parastep_on_loopback() {
    let t = TempDir::new().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    let common = ["--weights", weights(), "--steps", "23", "--warmup", "4", "--seed", "8"];
    ok(&[
        &["generate", "--strategy", "batchstep", "-s", "3", "--out-dir", s(&a)][..],
        &common,
    ]
    .concat());
    ok(&[
        &[
            "generate",
            "--strategy",
            "parastep",
            "-p",
            "3",
            "--backend",
            "loopback",
            "--out-dir",
            s(&b),
        ][..],
        &common,
    ]
    .concat());
    for f in ["trajectory.txt", "trajectory.bin", "samples.csv"] {
        assert_eq!(read(&a, f), read(&b, f), "{f}");
    }
    assert!(b.join("ledger.csv").exists() && !a.join("ledger.csv").exists());
}

#[test]
fn tcp_processes_match_loopback() {
    let t = TempDir::new().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    let common = [
        "--weights",
        weights(),
        "--strategy",
        "parastep",
        "-p",
        "3",
        "--steps",
        "20",
        "--warmup",
        "3",
        "--samples",
        "2",
    ];
    ok(&[&["generate", "--backend", "loopback", "--out-dir", s(&a)][..], &common].concat());
    ok(&[&["generate", "--backend", "tcp", "--out-dir", s(&b)][..], &common].concat());
    for f in ["trajectory.bin", "samples.csv", "ledger.csv", "summary.txt"] {
        if f == "summary.txt" {
            let strip = |d: &Path| {
                String::from_utf8(read(d, f))
                    .unwrap()
                    .replace("backend = tcp", "backend = loopback")
            };
            assert_eq!(strip(&a), strip(&b));
        } else {
            assert_eq!(read(&a, f), read(&b, f), "{f}");
        }
    }
    let summary = String::from_utf8(read(&b, "summary.txt")).unwrap();
    // 17 steps after warm-up in cycles of 3: five full cycles plus two steps.
    assert!(summary.contains("full_cycles = 5"), "{summary}");
    assert!(summary.contains("noise_frames = 11"), "{summary}");
}

#[test]
fn effective_config_reproduces_a_run() {
    let t = TempDir::new().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    ok(&[
        "generate",
        "--weights",
        weights(),
        "--strategy",
        "dynamic",
        "-s",
        "4",
        "--tau",
        "0.6",
        "--warmup-ratio",
        "0.2",
        "--seed",
        "11",
        "--out-dir",
        s(&a),
    ]);
    let echo = a.join("effective_config.toml");
    ok(&["generate", "--config", s(&echo), "--out-dir", s(&b)]);
    for f in ["trajectory.txt", "samples.csv", "summary.txt"] {
        assert_eq!(read(&a, f), read(&b, f), "{f}");
    }
}

#[test]
fn comparing_sequential_with_itself_is_zero() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    ok(&[
        "compare",
        "sequential",
        "sequential",
        "--weights",
        weights(),
        "--seeds",
        "3",
        "--steps",
        "12",
        "--out-dir",
        s(d),
    ]);
    let finals = String::from_utf8(read(d, "finals.csv")).unwrap();
    assert!(finals.lines().skip(1).all(|l| l.ends_with(",0,0")), "{finals}");
    let summary = String::from_utf8(read(d, "compare_summary.csv")).unwrap();
    assert!(summary.lines().skip(1).all(|l| l.ends_with(",n/a")), "{summary}");
    // Three seeds times eleven adjacent pairs, for each of the two entries.
    let adjacent = String::from_utf8(read(d, "adjacent.csv")).unwrap();
    assert_eq!(adjacent.lines().count(), 1 + 2 * 3 * 11);
}

#[test]
fn compare_reports_a_win_rate() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    ok(&[
        "compare",
        "parastep:2",
        "direct_reuse:2",
        "batchstep:2",
        "--weights",
        weights(),
        "--seeds",
        "4",
        "--out-dir",
        s(d),
    ]);
    let summary = String::from_utf8(read(d, "compare_summary.csv")).unwrap();
    let rows: Vec<Vec<&str>> = summary.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3);
    let rate: f64 = rows[0][6].parse().unwrap();
    assert!((0.0..=1.0).contains(&rate));
    assert_eq!(rows[1][6], "n/a");
    // Batch evaluation reproduces the emulation, so the two rows agree.
    assert_eq!(rows[0][1..6], rows[2][1..6]);
    let adjacent = String::from_utf8(read(d, "adjacent.csv")).unwrap();
    assert_eq!(adjacent.lines().count(), 1 + 3 * 4 * 49);
}

#[test]
fn commodel_row_and_renderings() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    let out = ok(&["commodel", "--L", "8", "--M", "1", "--out-dir", s(d)]);
    let csv = String::from_utf8(read(d, "commodel.csv")).unwrap();
    let degrees: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').nth(2).unwrap()).collect();
    assert_eq!(degrees, ["1", "2", "4", "8"]);
    assert!(csv.lines().any(|l| l.starts_with("8,1,4,48,12,1.5,")), "{csv}");
    let text = String::from_utf8(out.stdout).unwrap();
    let text_rows: Vec<String> = text
        .lines()
        .take(5)
        .map(|l| l.split_whitespace().collect::<Vec<_>>().join(","))
        .collect();
    assert_eq!(text_rows, csv.lines().collect::<Vec<_>>());
}

#[test]
fn bench_writes_a_report() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    ok(&[
        "bench",
        "--weights",
        weights(),
        "-p",
        "2",
        "--steps",
        "20",
        "--warmup",
        "2",
        "--ballast",
        "2",
        "--repetitions",
        "5",
        "--out-dir",
        s(d),
    ]);
    let report = String::from_utf8(read(d, "bench.txt")).unwrap();
    let field = |k: &str| -> f64 {
        let line = report.lines().find(|l| l.starts_with(&format!("{k} = "))).unwrap();
        line.split(" = ").nth(1).unwrap().parse().unwrap()
    };
    // Amdahl bound for 2 of 20 serial steps at p = 2.
    assert!((field("amdahl_bound") - 1.0 / (0.1 + 0.9 / 2.0)).abs() < 1e-3);
    assert!(field("speedup") > 0.0);
    let csv = String::from_utf8(read(d, "bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 5);
}
