//! Runs the `tapir` binary end to end on a tiny synthetic dataset.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tapir(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tapir"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

const SYNTH: &str = "\
num_events = 8
feature_dim = 6
frames_per_clip = 5
num_train = 12
num_val = 6
num_test = 6
eval_captions_per_audio = 2
seed = 3
";

const TRAIN: &str = "\
pooling = tap
loss = pmr
dim = 8
proj_dim = 4
hidden_dim = 8
batch_size = 4
epochs = 2
eval_ks = 1, 5
";

#[test]
fn synth_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let synth_cfg = dir.path().join("synth.cfg");
    let train_cfg = dir.path().join("train.cfg");
    let data = dir.path().join("data");
    let ckpt = dir.path().join("model.ckpt");
    let csv = dir.path().join("report.csv");
    fs::write(&synth_cfg, SYNTH).unwrap();
    fs::write(&train_cfg, TRAIN).unwrap();

    let out = tapir(&["synth-data", "--config", path(&synth_cfg), "--out", path(&data)]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    for split in ["train", "val", "test"] {
        assert!(data.join(format!("{split}.jsonl")).exists());
    }

    let out = tapir(&[
        "train",
        "--config",
        path(&train_cfg),
        "--data",
        path(&data),
        "--out",
        path(&ckpt),
    ]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let log = fs::read_to_string(ckpt.with_extension("steps.csv")).unwrap();
    assert!(log.starts_with("step,epoch,loss\n"));
    assert_eq!(log.lines().count(), 1 + 2 * 3);

    let eval = |extra: &[&str]| {
        let mut args = vec!["eval", "--ckpt", path(&ckpt), "--data", path(&data)];
        args.extend_from_slice(extra);
        let out = tapir(&args);
        assert!(out.status.success(), "{}", text(&out.stderr));
        text(&out.stdout)
    };
    let first = eval(&["--split", "test", "--csv", path(&csv)]);
    assert!(first.starts_with("direction,k,recall,num_queries\n"));
    assert!(first.contains("t2a.R@1 = "));
    assert!(first.contains("a2t.R@5 = "));
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 5);
    assert_eq!(eval(&[]), first, "evaluation is repeatable");
    assert_eq!(
        eval(&["--workers", "3"]),
        first,
        "worker count does not change the report"
    );
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "pooling = tap\nlearning_rate = 0.1\n").unwrap();
    let out = tapir(&[
        "train",
        "--config",
        path(&cfg),
        "--data",
        path(dir.path()),
        "--out",
        "x.ckpt",
    ]);
    assert!(!out.status.success());
    let err = text(&out.stderr);
    assert!(err.contains("learning_rate") && err.contains("line 2"), "{err}");
}

#[test]
fn eval_rejects_mismatched_features() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let wide = dir.path().join("wide");
    let ckpt = dir.path().join("m.ckpt");
    let synth_cfg = dir.path().join("synth.cfg");
    let train_cfg = dir.path().join("train.cfg");
    fs::write(&synth_cfg, SYNTH).unwrap();
    fs::write(&train_cfg, TRAIN.replace("epochs = 2", "epochs = 1")).unwrap();
    assert!(
        tapir(&["synth-data", "--config", path(&synth_cfg), "--out", path(&data)])
            .status
            .success()
    );
    fs::write(&synth_cfg, SYNTH.replace("feature_dim = 6", "feature_dim = 7")).unwrap();
    assert!(
        tapir(&["synth-data", "--config", path(&synth_cfg), "--out", path(&wide)])
            .status
            .success()
    );
    let out = tapir(&[
        "train",
        "--config",
        path(&train_cfg),
        "--data",
        path(&data),
        "--out",
        path(&ckpt),
    ]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let out = tapir(&["eval", "--ckpt", path(&ckpt), "--data", path(&wide)]);
    assert!(!out.status.success());
    assert!(text(&out.stderr).contains("6-wide"), "{}", text(&out.stderr));
}

#[test]
fn gradcheck_reports_and_exits_cleanly() {
    let out = tapir(&["gradcheck", "--pooling", "tap", "--loss", "pmr"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let stdout = text(&out.stdout);
    assert_eq!(stdout.lines().count(), 1);
    assert!(stdout.starts_with("pooling=tap loss=pmr stop_gradient_prior=false"));
    assert!(stdout.trim_end().ends_with("PASS"));

    let out = tapir(&["gradcheck", "--stop-gradient-prior", "--verbose"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert_eq!(
        text(&out.stdout).lines().filter(|l| l.starts_with("pooling=")).count(),
        8
    );

    let out = tapir(&["gradcheck", "--pooling", "attention"]);
    assert!(!out.status.success());
}
