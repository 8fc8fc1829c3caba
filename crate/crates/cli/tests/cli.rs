use std::path::{Path, PathBuf};

use assert_cmd::Command;
use lmvae_core::train::Checkpoint;
use tempfile::TempDir;

const CONFIG: &str = r#"
name = "cli-test"
mode = "supervised"
seed = 3
[capacity]
kind = "fixed"
experts = 2
[model]
latent = 4
hidden = [16]
[training]
epochs = 2
batch_size = 32
learning_rate = 5e-2
eval_samples = 40
[[tasks]]
source = "synth"
generator = "gaussian-blobs(4)"
seed = 1
train = 96
test = 40
[[tasks]]
source = "synth"
generator = "stripes"
seed = 2
train = 96
test = 40
"#;

fn lmvae() -> Command {
    Command::cargo_bin("lmvae").unwrap()
}

fn setup() -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, CONFIG).unwrap();
    (dir, cfg)
}

fn train(cfg: &Path, out: &Path, extra: &[&str]) {
    lmvae()
        .arg("train")
        .arg("--config")
        .arg(cfg)
        .arg("--output-dir")
        .arg(out)
        .args(extra)
        .assert()
        .success();
}

/// Checkpoint bytes with the output directory blanked, since runs written
/// to different directories record different paths.
fn run_bytes(path: &Path) -> Vec<u8> {
    let mut c = Checkpoint::load(path).unwrap();
    c.config.output_dir = None;
    c.to_bytes()
}

fn stdout(cmd: &mut Command) -> String {
    let out = cmd.assert().success().get_output().stdout.clone();
    String::from_utf8(out).unwrap()
}

#[test]
fn train_twice_gives_identical_event_logs() {
    let (dir, cfg) = setup();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    train(&cfg, &a, &["--seed", "7"]);
    train(&cfg, &b, &["--seed", "7"]);
    assert_eq!(
        run_bytes(&a.join("last.ckpt")),
        run_bytes(&b.join("last.ckpt"))
    );
    for f in ["events.csv", "eval.csv"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f} differs"
        );
    }
    let c = dir.path().join("c");
    train(&cfg, &c, &["--seed", "8"]);
    assert_ne!(
        run_bytes(&a.join("last.ckpt")),
        run_bytes(&c.join("last.ckpt"))
    );
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let (dir, cfg) = setup();
    let full = dir.path().join("full");
    train(&cfg, &full, &[]);
    let resumed = dir.path().join("resumed");
    lmvae()
        .arg("train")
        .arg("--resume")
        .arg(full.join("task0.ckpt"))
        .arg("--output-dir")
        .arg(&resumed)
        .assert()
        .success();
    assert_eq!(
        std::fs::read(full.join("events.csv")).unwrap(),
        std::fs::read(resumed.join("events.csv")).unwrap()
    );
    assert_eq!(
        run_bytes(&full.join("last.ckpt")),
        run_bytes(&resumed.join("last.ckpt"))
    );
}

#[test]
fn eval_emits_rows_for_the_requested_task() {
    let (dir, cfg) = setup();
    let out = dir.path().join("out");
    train(&cfg, &out, &[]);
    let csv = stdout(
        lmvae()
            .args(["eval", "--task", "0", "--checkpoint"])
            .arg(out.join("last.ckpt")),
    );
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("after_task,step,task,name,metric,value"));
    let rows: Vec<&str> = lines.collect();
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|r| r.split(',').nth(2) == Some("0")));
    assert!(rows.iter().any(|r| r.contains(",accuracy,")));

    let recomputed = stdout(
        lmvae()
            .args(["eval", "--recompute", "--task", "0", "--checkpoint"])
            .arg(out.join("last.ckpt")),
    );
    assert_eq!(csv, recomputed);
}

#[test]
fn traverse_writes_one_pgm_per_step() {
    let (dir, cfg) = setup();
    let out = dir.path().join("out");
    train(&cfg, &out, &[]);
    let frames = dir.path().join("frames");
    lmvae()
        .args([
            "traverse", "--dim", "3", "--range", "-3", "3", "--steps", "10",
        ])
        .arg("--checkpoint")
        .arg(out.join("last.ckpt"))
        .arg("--output-dir")
        .arg(&frames)
        .assert()
        .success();
    let mut names: Vec<String> = std::fs::read_dir(&frames)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names.len(), 10);
    assert!(names.iter().all(|n| n.ends_with(".pgm")));
    let first = std::fs::read(frames.join(&names[0])).unwrap();
    assert!(first.starts_with(b"P5"));
}

#[test]
fn interpolate_writes_frames() {
    let (dir, cfg) = setup();
    let out = dir.path().join("out");
    train(&cfg, &out, &[]);
    let frames = dir.path().join("frames");
    lmvae()
        .args([
            "interpolate",
            "--task",
            "1",
            "--from",
            "2",
            "--to",
            "5",
            "--steps",
            "4",
        ])
        .arg("--checkpoint")
        .arg(out.join("last.ckpt"))
        .arg("--output-dir")
        .arg(&frames)
        .assert()
        .success();
    assert_eq!(std::fs::read_dir(&frames).unwrap().count(), 4);
}

#[test]
fn classify_writes_one_row_per_sample() {
    let (dir, cfg) = setup();
    let out = dir.path().join("out");
    train(&cfg, &out, &[]);
    let dest = dir.path().join("classes.csv");
    lmvae()
        .args(["classify", "--checkpoint"])
        .arg(out.join("last.ckpt"))
        .arg("--output")
        .arg(&dest)
        .assert()
        .success();
    let text = std::fs::read_to_string(dest).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("sample,task,expert,predicted,true"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 80);
    assert!(rows
        .iter()
        .all(|r| r.len() == 5 && !r[3].is_empty() && !r[4].is_empty()));
}

#[test]
fn inspect_prints_the_manifest() {
    let (dir, cfg) = setup();
    let out = dir.path().join("out");
    train(&cfg, &out, &[]);
    let text = stdout(
        lmvae()
            .args(["inspect-checkpoint", "--checkpoint"])
            .arg(out.join("last.ckpt")),
    );
    assert!(text.contains("run cli-test"));
    assert!(text.contains("tasks completed 2/2"));
    assert!(text.contains("expert 1:"));
}

#[test]
fn usage_errors_exit_with_two() {
    lmvae().arg("frobnicate").assert().code(2);
    lmvae().args(["train", "--bogus"]).assert().code(2);
    lmvae().arg("train").assert().code(2);
}

#[test]
fn configuration_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    lmvae()
        .args(["train", "--output-dir", "x", "--config"])
        .arg(dir.path().join("missing.toml"))
        .assert()
        .code(2);
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, CONFIG.replace("epochs = 2", "epochs = 0")).unwrap();
    lmvae()
        .args(["train", "--output-dir", "x", "--config"])
        .arg(&bad)
        .assert()
        .code(2);
    std::fs::write(&bad, CONFIG.replace("kind = \"fixed\"", "kind = \"bogus\"")).unwrap();
    lmvae()
        .args(["train", "--output-dir", "x", "--config"])
        .arg(&bad)
        .assert()
        .code(2);
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    lmvae()
        .args(["eval", "--checkpoint"])
        .arg(dir.path().join("missing.ckpt"))
        .assert()
        .code(1);
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    lmvae()
        .args(["inspect-checkpoint", "--checkpoint"])
        .arg(&junk)
        .assert()
        .code(1);
    // One expert cannot hold two tasks.
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, CONFIG.replace("experts = 2", "experts = 1")).unwrap();
    lmvae()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--output-dir")
        .arg(dir.path().join("out"))
        .assert()
        .code(1);
}
