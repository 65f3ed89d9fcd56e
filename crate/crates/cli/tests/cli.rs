use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ebm_core::checkpoint::Checkpoint;
use ebm_core::config::RunConfig;

fn ebm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ebm"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = ebm(args);
    assert!(
        out.status.success(),
        "ebm {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

const SMALL_MIXTURE: &str = r#"
seed = 3

[model]
kind = "mlp"
widths = [2, 16, 1]

[data]
kind = "mixture"
centers = [[0.2, 0.2], [0.8, 0.8]]
sigma = 0.02
n = 200

[train]
l2_coeff = 0.1
learning_rate = 1e-3
batch_size = 32
total_steps = 20

[train.langevin]
steps = 10
step_size = 2e-4
noise = 0.01
grad_clip = inf
"#;

/// `½(x − 0.5)²` on [0, 1], untrained.
const QUADRATIC: &str = r#"
[model]
kind = "quadratic"
dim = 1

[data]
kind = "mixture"
centers = [[0.5]]
sigma = 0.1
n = 10

[train]
total_steps = 0
"#;

#[test]
fn untrained_checkpoint_reloads() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "c.toml",
        &SMALL_MIXTURE.replace("total_steps = 20", "total_steps = 0"),
    );
    let ck = dir.path().join("m.ebm");
    ok(&["train", "--config", s(&cfg), "--out", s(&ck)]);
    let loaded = Checkpoint::load(&ck).unwrap();
    assert_eq!(loaded.manifest.step, 0);
    assert_eq!(loaded.to_bytes().unwrap(), std::fs::read(&ck).unwrap());
    let metrics = std::fs::read_to_string(dir.path().join("m.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1);
}

#[test]
fn zero_step_sampling_returns_the_init_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", SMALL_MIXTURE);
    let ck = dir.path().join("m.ebm");
    ok(&["train", "--config", s(&cfg), "--out", s(&ck)]);
    let first = dir.path().join("first.csv");
    ok(&["sample", "--checkpoint", s(&ck), "--n", "16", "--out", s(&first)]);
    let again = dir.path().join("again.csv");
    ok(&[
        "sample",
        "--checkpoint",
        s(&ck),
        "--steps",
        "0",
        "--init-file",
        s(&first),
        "--out",
        s(&again),
    ]);
    assert_eq!(std::fs::read(&first).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn train_and_sample_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", SMALL_MIXTURE);
    let run = |tag: &str| {
        let ck = dir.path().join(format!("{tag}.ebm"));
        let out = dir.path().join(format!("{tag}.samples.csv"));
        ok(&["train", "--config", s(&cfg), "--out", s(&ck)]);
        ok(&["--seed", "9", "sample", "--checkpoint", s(&ck), "--out", s(&out)]);
        (std::fs::read(ck).unwrap(), std::fs::read(out).unwrap())
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn logz_bracket_contains_the_quadrature_value() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "q.toml", QUADRATIC);
    let ck = dir.path().join("q.ebm");
    ok(&["train", "--config", s(&cfg), "--out", s(&ck)]);
    let report = dir.path().join("z.csv");
    ok(&[
        "eval",
        "--checkpoint",
        s(&ck),
        "--metric",
        "logz-bracket",
        "--out",
        s(&report),
    ]);
    let text = std::fs::read_to_string(&report).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let row: Vec<f64> = lines
        .next()
        .unwrap()
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect();
    let col = |name: &str| row[header.iter().position(|h| *h == name).unwrap()];
    let (lower, upper, quad) = (col("lower"), col("upper"), col("quadrature"));
    // Midpoint rule on a finer grid than the report uses.
    let n = 100_000;
    let z: f64 = (0..n)
        .map(|i| {
            let x = (i as f64 + 0.5) / n as f64;
            (-0.5 * (x - 0.5) * (x - 0.5)).exp()
        })
        .sum::<f64>()
        / n as f64;
    assert!((quad - z.ln()).abs() < 1e-6, "{quad} vs {}", z.ln());
    assert!(lower <= quad && quad <= upper, "[{lower}, {upper}] misses {quad}");
}

#[test]
fn errors_are_one_categorised_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "bad.toml",
        &SMALL_MIXTURE.replace("seed = 3", "seed = 3\nsede = 4"),
    );
    let out = ebm(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("x.ebm"))]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error[config]: "), "{err}");

    let out = ebm(&["sample", "--checkpoint", s(&dir.path().join("missing.ebm")), "--out", "x.csv"]);
    assert!(!out.status.success());
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error[io]: "));
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(root).unwrap() {
        let p = entry.unwrap().path();
        if p.extension().is_some_and(|e| e == "toml") {
            RunConfig::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
            seen += 1;
        }
    }
    assert!(seen >= 3);
}
