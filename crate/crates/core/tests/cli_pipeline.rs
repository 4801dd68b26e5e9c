use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dpm::approximators::ModelRegistry;
use dpm::cli::checkpoint::{Checkpoint, CheckpointError, Container};
use dpm::cli::textio::TextMatrix;
use dpm::error::Error;

fn dpm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpm")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = dpm(args);
    assert!(
        out.status.success(),
        "dpm {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(format!("{name}.cfg"));
    std::fs::write(&path, body).unwrap();
    path
}

const SWISS: &str = "
name = swiss-small
data = roll.txt
holdout = 40
steps = 8
schedule = learnable
model = rbf
hidden = 6
batch_size = 20
train_steps = 30
log_every = 10
out_dir = run
";

const HEART: &str = "
name = heart-small
data = hb.txt
holdout = 20
steps = 12
model = mlp
hidden = 8, 8
batch_size = 20
train_steps = 20
t_samples = 4
log_every = 10
out_dir = run
";

fn swiss_run(dir: &Path) -> PathBuf {
    ok(&["gen-data", "--kind", "swiss-roll", "--n", "240", "--seed", "3", "--out", p(&dir.join("roll.txt"))]);
    ok(&["train", "--config", p(&write_config(dir, "swiss", SWISS))]);
    dir.join("run")
}

fn heart_run(dir: &Path) -> PathBuf {
    ok(&["gen-data", "--kind", "heartbeat", "--n", "120", "--out", p(&dir.join("hb.txt"))]);
    ok(&["train", "--config", p(&write_config(dir, "heart", HEART))]);
    dir.join("run")
}

#[test]
fn swiss_roll_pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let run = swiss_run(tmp.path());
    for f in ["init.ckpt", "final.ckpt", "holdout.txt", "train_log.csv"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    assert!(!run.join(".lock").exists());
    let log = std::fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert!(log.starts_with("step,seconds,k_bits,grad_norm"));
    assert!(log.lines().count() >= 3);

    let ckpt = run.join("final.ckpt");
    let samples = tmp.path().join("samples.txt");
    ok(&["sample", "--ckpt", p(&ckpt), "--n", "25", "--out", p(&samples), "--frames"]);
    assert_eq!(TextMatrix::read(&samples).unwrap().data.dim(), (25, 2));
    let frames = tmp.path().join("samples.txt.frames");
    assert_eq!(std::fs::read_dir(&frames).unwrap().count(), 9);
    let last = TextMatrix::read(&frames.join("t00000.txt")).unwrap();
    assert_eq!(last.data, TextMatrix::read(&samples).unwrap().data);

    let report = tmp.path().join("eval.txt");
    ok(&[
        "evaluate", "--ckpt", p(&ckpt), "--data", p(&run.join("holdout.txt")), "--n-traj", "20", "--out", p(&report),
    ]);
    let text = std::fs::read_to_string(&report).unwrap();
    assert!(text.contains("jensen_ok=true"));
    assert!(text.contains("kl_bits_t8="));

    std::fs::write(tmp.path().join("mask.txt"), "1 0\n").unwrap();
    std::fs::write(tmp.path().join("obs.txt"), "0.25 0\n").unwrap();
    let cond = tmp.path().join("cond.txt");
    ok(&[
        "conditional", "--ckpt", p(&ckpt), "--mask", p(&tmp.path().join("mask.txt")), "--obs",
        p(&tmp.path().join("obs.txt")), "--n", "30", "--out", p(&cond),
    ]);
    let c = TextMatrix::read(&cond).unwrap();
    assert!(c.data.column(0).iter().all(|&v| v == 0.25));

    let denoised = tmp.path().join("denoised.txt");
    ok(&[
        "conditional", "--ckpt", p(&ckpt), "--obs", p(&tmp.path().join("obs.txt")), "--noise-var", "0.1",
        "--r-schedule", "annealed", "--n", "10", "--out", p(&denoised),
    ]);
    assert_eq!(TextMatrix::read(&denoised).unwrap().get("r_schedule"), Some("annealed"));

    let bounds = tmp.path().join("bounds.txt");
    ok(&["bounds", "--ckpt", p(&ckpt), "--data", p(&run.join("holdout.txt")), "--out", p(&bounds)]);
    let table = TextMatrix::read(&bounds).unwrap().data;
    assert_eq!(table.nrows(), 7);
    assert!(table.rows().into_iter().all(|r| r[2] <= r[1]));
}

#[test]
fn heartbeat_pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let run = heart_run(tmp.path());
    let ckpt = run.join("final.ckpt");
    let samples = tmp.path().join("samples.txt");
    ok(&["sample", "--ckpt", p(&ckpt), "--n", "15", "--seed", "4", "--out", p(&samples)]);
    let s = TextMatrix::read(&samples).unwrap().data;
    assert_eq!(s.dim(), (15, 20));
    assert!(s.iter().all(|&v| v == 0.0 || v == 1.0));

    let report = tmp.path().join("eval.txt");
    ok(&["evaluate", "--ckpt", p(&ckpt), "--data", p(&run.join("holdout.txt")), "--n-traj", "10", "--out", p(&report)]);
    let text = std::fs::read_to_string(&report).unwrap();
    assert!(text.contains("null_bits=-2.0000000000000000e1"), "{text}");
    assert!(text.contains("mean_null_bits="));

    let mut mask = vec!["0"; 20];
    mask[..5].fill("1");
    std::fs::write(tmp.path().join("mask.txt"), mask.join(" ")).unwrap();
    std::fs::write(tmp.path().join("obs.txt"), "1 0 0 0 0".to_string() + &" 0".repeat(15)).unwrap();
    let cond = tmp.path().join("cond.txt");
    ok(&[
        "conditional", "--ckpt", p(&ckpt), "--mask", p(&tmp.path().join("mask.txt")), "--obs",
        p(&tmp.path().join("obs.txt")), "--n", "12", "--out", p(&cond),
    ]);
    let c = TextMatrix::read(&cond).unwrap().data;
    for row in c.rows() {
        assert_eq!(row.iter().take(5).copied().collect::<Vec<_>>(), vec![1.0, 0.0, 0.0, 0.0, 0.0]);
    }
}

#[test]
fn training_and_sampling_are_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = swiss_run(a.path());
    let rb = swiss_run(b.path());
    let bytes = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(bytes(&ra, "final.ckpt"), bytes(&rb, "final.ckpt"));
    assert_eq!(bytes(&ra, "init.ckpt"), bytes(&rb, "init.ckpt"));
    for (dir, run) in [(a.path(), &ra), (b.path(), &rb)] {
        ok(&["sample", "--ckpt", p(&run.join("final.ckpt")), "--n", "20", "--seed", "9", "--out", p(&dir.join("s.txt"))]);
    }
    assert_eq!(bytes(a.path(), "s.txt"), bytes(b.path(), "s.txt"));
}

#[test]
fn checkpoint_round_trip_is_bitwise_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let run = heart_run(tmp.path());
    let path = run.join("final.ckpt");
    let original = std::fs::read(&path).unwrap();
    let ck = Checkpoint::load(&path, &ModelRegistry::with_defaults()).unwrap();
    assert_eq!(ck.model.kind().to_string(), "binomial");
    let copy = tmp.path().join("copy.ckpt");
    ck.save(&copy).unwrap();
    assert_eq!(std::fs::read(&copy).unwrap(), original);
    let reloaded = Checkpoint::load(&copy, &ModelRegistry::with_defaults()).unwrap();
    assert_eq!(reloaded.model.parameters(), ck.model.parameters());
    assert_eq!(reloaded.step, 20);

    let mut corrupt = original.clone();
    let mid = corrupt.len() / 2;
    corrupt[mid] ^= 0x10;
    assert!(matches!(Container::from_bytes(&corrupt), Err(CheckpointError::ChecksumMismatch)));
    assert!(matches!(Container::from_bytes(&original[..original.len() - 7]), Err(CheckpointError::ChecksumMismatch)));
    assert!(matches!(Container::from_bytes(&original[..4]), Err(CheckpointError::Truncated | CheckpointError::BadMagic)));
    let mut wrong = original;
    wrong[0] = b'X';
    assert!(matches!(Container::from_bytes(&wrong), Err(CheckpointError::BadMagic)));
}

#[test]
fn exit_codes_and_error_messages() {
    assert_eq!(dpm(&[]).status.code(), Some(2));
    assert_eq!(dpm(&["sample", "--bogus"]).status.code(), Some(2));
    assert_eq!(dpm(&["--help"]).status.code(), Some(0));
    let out = dpm(&["sample", "--ckpt", "/nonexistent/model.ckpt", "--out", "/tmp/never.txt"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "bad", "steps = 4\nmodel = rbf\ndataset = swiss-roll\nn = 10\ncolour = red\n");
    let out = dpm(&["train", "--config", p(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key 'colour'"));
}

#[test]
fn evaluating_on_the_wrong_data_kind_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let run = heart_run(tmp.path());
    let roll = tmp.path().join("roll.txt");
    ok(&["gen-data", "--kind", "swiss-roll", "--n", "30", "--out", p(&roll)]);
    let out = dpm(&["evaluate", "--ckpt", p(&run.join("final.ckpt")), "--data", p(&roll)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint holds a binomial model"), "{}", String::from_utf8_lossy(&out.stderr));

    let ck = Checkpoint::load(&run.join("final.ckpt"), &ModelRegistry::with_defaults()).unwrap();
    assert!(matches!(
        ck.expect_kind(dpm::kernels::DiffusionKind::Gaussian),
        Err(Error::KindMismatch { .. } | Error::Checkpoint(CheckpointError::KindMismatch { .. }))
    ));
}

#[test]
fn a_locked_run_directory_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["gen-data", "--kind", "heartbeat", "--n", "60", "--out", p(&tmp.path().join("hb.txt"))]);
    std::fs::create_dir_all(tmp.path().join("run")).unwrap();
    std::fs::write(tmp.path().join("run/.lock"), "").unwrap();
    let out = dpm(&["train", "--config", p(&write_config(tmp.path(), "heart", HEART))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("locked"));
}
