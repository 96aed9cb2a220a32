use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")
}

fn diffcom(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diffcom"))
        .args(args)
        .arg("--config")
        .arg(smoke_config())
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

fn run_ok(args: &[&str], out: &Path) {
    let o = diffcom(args, out);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
}

fn pipeline(out: &Path) {
    for cmd in ["gen-synthetic", "train-encoder", "train-denoiser", "evaluate", "dump-trajectory"] {
        run_ok(&[cmd], out);
    }
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path());
    for f in [
        "data/train.tsv",
        "data/dev.tsv",
        "data/test.tsv",
        "data/features.txt",
        "encoder.ckpt",
        "denoiser.ckpt",
        "encoder.log.tsv",
        "denoiser.log.tsv",
        "metrics.tsv",
        "trajectory.csv",
        "evaluate.effective.toml",
    ] {
        assert!(dir.path().join(f).is_file(), "missing {f}");
    }
    let metrics = std::fs::read_to_string(dir.path().join("metrics.tsv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines.len(), 3, "{metrics}");
    assert!(lines[1].starts_with("encoder-x0\ttest\t"));
    assert!(lines[2].starts_with("generated-x0\ttest\t"));

    let traj = std::fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    assert!(traj.starts_with("query_id,step,entity_id,score,is_gold\n"));
    // every test query exports its gold entity at step 0
    let gold_at_zero = traj.lines().filter(|l| l.split(',').nth(1) == Some("0") && l.ends_with(",1")).count();
    let test_lines = std::fs::read_to_string(dir.path().join("data/test.tsv")).unwrap().lines().count();
    assert_eq!(gold_at_zero, test_lines);
}

#[test]
fn identical_seeds_give_identical_bytes() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path());
    pipeline(b.path());
    for f in ["encoder.ckpt", "denoiser.ckpt", "metrics.tsv", "trajectory.csv", "data/train.tsv"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert!(x == y, "{f} differs between runs");
    }
}

#[test]
fn evaluate_without_denoiser_names_the_artifact() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&["gen-synthetic"], dir.path());
    run_ok(&["train-encoder"], dir.path());
    let o = diffcom(&["evaluate"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("error[missing-artifact]") && err.contains("denoiser.ckpt"), "{err}");
}

#[test]
fn encoder_only_evaluation_needs_no_denoiser() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&["gen-synthetic"], dir.path());
    run_ok(&["train-encoder"], dir.path());
    let o = diffcom(&["evaluate", "--set", "eval.sources=[\"encoder\"]"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = std::fs::read_to_string(dir.path().join("metrics.tsv")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
}

#[test]
fn unknown_config_key_exits_with_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = diffcom(&["gen-synthetic", "--set", "encoder.bogus=1"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error[config]"));
    assert!(!dir.path().join("data").exists());
}

#[test]
fn inspect_checkpoint_reports_owner_and_arrays() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&["gen-synthetic"], dir.path());
    run_ok(&["train-encoder"], dir.path());
    let o = Command::new(env!("CARGO_BIN_EXE_diffcom"))
        .arg("inspect-checkpoint")
        .arg(dir.path().join("encoder.ckpt"))
        .output()
        .unwrap();
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.lines().any(|l| l == "owner=encoder"), "{text}");
    assert!(text.contains("entity\t[24, 8]"), "{text}");

    let o = Command::new(env!("CARGO_BIN_EXE_diffcom"))
        .arg("inspect-checkpoint")
        .arg(dir.path().join("nope.ckpt"))
        .output()
        .unwrap();
    assert!(!o.status.success());
}

#[test]
fn denoiser_refuses_an_encoder_trained_under_another_config() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&["gen-synthetic"], dir.path());
    run_ok(&["train-encoder"], dir.path());
    let o = diffcom(&["train-denoiser", "--set", "encoder.dim=12"], dir.path());
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("error[checkpoint]"));
}
