use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
run.batch_size = 16
run.pretrain_epochs = 1
run.search_epochs = 1
run.finetune_epochs = 1
backbone.widths = 4,8
backbone.nodes = 2,1
data.image_size = 8
data.classes = 4
data.source.train = 32
data.source.val = 16
data.target.train = 40
data.target.val = 16
oracle.nodes = 2
oracle.width = 4
oracle.epochs = 1
oracle.under_epochs = 1
oracle.search_epochs = 1
contrastive.epochs = 1
contrastive.linear_epochs = 1
contrastive.queue = 16
";

fn ntaa(args: &[&str], dir: &Path) -> Output {
    let cfg = dir.join("tiny.cfg");
    if !cfg.exists() {
        fs::write(&cfg, TINY).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_ntaa")).current_dir(dir).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = ntaa(&["frobnicate"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("frobnicate"));
}

#[test]
fn help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let o = ntaa(&["--help"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("adapt"));
}

#[test]
fn unknown_key_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let o = ntaa(&["pretrain", "--config", "tiny.cfg", "--set", "run.speed=3"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("run.speed"));
}

#[test]
fn bad_value_names_the_value() {
    let dir = tempfile::tempdir().unwrap();
    let o = ntaa(&["pretrain", "--set", "run.lambda=lots"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("lots"));
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = ntaa(&["adapt", "--config", "tiny.cfg", "--checkpoint", "nope.ckpt"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn corrupt_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.ckpt"), b"not a checkpoint").unwrap();
    let o = ntaa(&["finetune", "--config", "tiny.cfg", "--checkpoint", "bad.ckpt"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("magic"));
}

#[test]
fn pretrain_then_adapt_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = ntaa(&["pretrain", "--config", "tiny.cfg", "--seed", "3", "--out", "a"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = ntaa(
        &[
            "adapt",
            "--config",
            "tiny.cfg",
            "--seed",
            "3",
            "--checkpoint",
            "a/pretrain.ckpt",
            "--out",
            "a",
        ],
        d,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    for f in [
        "pretrain.ckpt",
        "supernet.ckpt",
        "adapted.ckpt",
        "arch.bin",
        "arch.dot",
        "report.jsonl",
        "config.txt",
    ] {
        assert!(d.join("a").join(f).exists(), "{f} missing");
    }
    let config = fs::read_to_string(d.join("a/config.txt")).unwrap();
    assert!(config.contains("run.seed = 3"));

    let report = fs::read_to_string(d.join("a/report.jsonl")).unwrap();
    let kinds: Vec<String> = report
        .lines()
        .map(|l| {
            serde_json::from_str::<serde_json::Value>(l).unwrap()["record"]
                .as_str()
                .unwrap()
                .to_string()
        })
        .collect();
    assert_eq!(kinds[0], "config");
    assert!(kinds.iter().any(|k| k == "theta"));
    assert!(kinds.iter().any(|k| k == "summary"));

    let text = ntaa(&["export-arch", "a/arch.bin"], d);
    assert!(text.status.success());
    assert!(String::from_utf8_lossy(&text.stdout).starts_with("backbone "));
    let dot = ntaa(&["export-arch", "a/arch.bin", "--dot"], d);
    assert!(String::from_utf8_lossy(&dot.stdout).starts_with("digraph"));
}

#[test]
fn pretrain_is_reproducible_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for out in ["x", "y"] {
        assert!(ntaa(&["pretrain", "--config", "tiny.cfg", "--out", out], d).status.success());
    }
    assert_eq!(
        fs::read(d.join("x/pretrain.ckpt")).unwrap(),
        fs::read(d.join("y/pretrain.ckpt")).unwrap()
    );
    assert_eq!(
        fs::read(d.join("x/report.jsonl")).unwrap(),
        fs::read(d.join("y/report.jsonl")).unwrap()
    );
}

#[test]
fn self_supervised_chain_runs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = ntaa(&["unsup-pretrain", "--config", "tiny.cfg", "--out", "u"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = ntaa(
        &[
            "linear-search",
            "--config",
            "tiny.cfg",
            "--checkpoint",
            "u/super_alpha0.ckpt",
            "--out",
            "l",
        ],
        d,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let o = ntaa(
        &["finetune", "--config", "tiny.cfg", "--checkpoint", "l/supernet.ckpt", "--out", "f"],
        d,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(d.join("f/adapted.ckpt").exists());
}

#[test]
fn wpf_partial_and_oracle_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = ntaa(&["wpf", "--mode", "partial", "--config", "tiny.cfg", "--out", "w"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("wpf-partial"));
    let o = ntaa(&["oracle", "--config", "tiny.cfg", "--out", "o"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(d.join("o/ratings.csv")).unwrap();
    assert_eq!(csv.lines().count(), 10);
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = ntaa(&["gradcheck", "--seeds", "2", "--out", "g"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("g/gradcheck.jsonl").exists());
}
