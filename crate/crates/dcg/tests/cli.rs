//! File contract and exit codes of the `dcg` binary.

use std::path::Path;
use std::process::{Command, Output};

fn dcg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.cfg");
    std::fs::write(&path, text).unwrap();
    path.display().to_string()
}

const SMALL: &str = "\
world.num_items = 60
world.num_users = 80
world.interactions_per_user = 10
train.epochs = 2
train.batch_size = 32
queue.capacity = 128
eval.k = 10
";

#[test]
fn simulate_writes_the_three_files_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = dcg(&[
            "simulate",
            "-c",
            &cfg,
            "-o",
            out.to_str().unwrap(),
            "--seed",
            "9",
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stdout).contains("simulated"));
    }
    for f in ["interactions.tsv", "catalog.tsv", "truth.jsonl"] {
        let x = std::fs::read(a.join(f)).unwrap();
        assert!(!x.is_empty(), "{f}");
        assert_eq!(x, std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let c = dir.path().join("c");
    dcg(&[
        "simulate",
        "-c",
        &cfg,
        "-o",
        c.to_str().unwrap(),
        "--seed",
        "10",
    ]);
    assert_ne!(
        std::fs::read(a.join("interactions.tsv")).unwrap(),
        std::fs::read(c.join("interactions.tsv")).unwrap()
    );
}

#[test]
fn every_output_carries_the_config_hash() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{SMALL}bench.items = 300\n"));
    let out = dir.path().join("run");
    let o = out.to_str().unwrap();
    for cmd in ["simulate", "train", "eval"] {
        let r = dcg(&[cmd, "-c", &cfg, "-o", o, "--workers", "2"]);
        assert!(
            r.status.success(),
            "{cmd}: {}",
            String::from_utf8_lossy(&r.stderr)
        );
    }
    let mut expected = dcg::config::Config::from_file(Path::new(&cfg)).unwrap();
    expected.set("train.workers", "2").unwrap();
    let run_hash = expected.hash();
    for f in [
        "catalog.tsv",
        "interactions.tsv",
        "truth.jsonl",
        "history.jsonl",
        "metrics.json",
        "histogram.csv",
    ] {
        let text = std::fs::read_to_string(out.join(f)).unwrap();
        assert!(text.contains(&run_hash), "{f} lacks the config hash");
    }
    let ckpt = dcg::checkpoint::load(&out.join("model.ckpt")).unwrap();
    assert_eq!(ckpt.config_hash, run_hash);
    let history = std::fs::read_to_string(out.join("history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 2);
}

#[test]
fn missing_or_invalid_config_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = dcg(&[
        "simulate",
        "-c",
        "/nonexistent/world.cfg",
        "-o",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("world.cfg"));
    let bad = write_config(dir.path(), "train.batch_size = many\n");
    assert_eq!(
        dcg(&["train", "-c", &bad, "-o", dir.path().to_str().unwrap()])
            .status
            .code(),
        Some(2)
    );
    let unknown = write_config(dir.path(), "train.colour = blue\n");
    assert_eq!(
        dcg(&["train", "-c", &unknown, "-o", dir.path().to_str().unwrap()])
            .status
            .code(),
        Some(2)
    );
    let o = dcg(&[
        "train",
        "--mode",
        "nonsense",
        "-o",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_with_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = dcg(&["eval", "-o", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!o.stderr.is_empty());
}

#[test]
fn acceptance_failures_exit_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let strict = write_config(dir.path(), "gradcheck.tolerance = 0\n");
    let o = dcg(&["gradcheck", "-c", &strict, "-o", out]);
    assert_eq!(
        o.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let v: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("gradcheck.json")).unwrap()).unwrap();
    assert_eq!(v["passed"], false);
    let short = write_config(dir.path(), "theorem.instances = 1\ntheorem.steps = 10\n");
    assert_eq!(
        dcg(&["verify-theorem", "-c", &short, "-o", out])
            .status
            .code(),
        Some(3)
    );
}

#[test]
fn checks_pass_at_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = dcg(&["gradcheck", "-o", out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let cfg = write_config(dir.path(), "theorem.instances = 2\n");
    let o = dcg(&["verify-theorem", "-c", &cfg, "-o", out]);
    assert!(o.status.success());
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
    assert_eq!(report["cases"].as_array().unwrap().len(), 2);
}

#[test]
fn bench_reports_the_counter_identity() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "train.batch_size = 16\nqueue.capacity = 160\nbench.items = 400\n",
    );
    let o = dcg(&["bench", "-c", &cfg, "-o", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("bench.json")).unwrap()).unwrap();
    assert_eq!(v["passed"], true);
    let ratio = v["forward_ratio"].as_f64().unwrap();
    assert!(ratio <= 16.0 / 176.0 + 1e-9);
    let rows = v["rows"].as_array().unwrap();
    let cached = rows
        .iter()
        .find(|r| r["mode"] == "clrec_queue_cached")
        .unwrap();
    assert_eq!(cached["item_encoder_forwards"], 16.0);
    assert_eq!(cached["candidate_bytes_moved"], 0.0);
}
