use std::path::Path;
use std::process::{Command, Output};

fn amsrc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_amsrc")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("run.conf");
    std::fs::write(&path, body).unwrap();
    path.display().to_string()
}

const TINY: &str = "preset = synth\n\
model.widths = 4,8,16\n\
train.epochs = 1\n\
train.batch_size = 16\n\
synth.height = 48\n\
synth.width = 48\n\
synth.train_videos = 2\n\
synth.test_videos = 2\n\
synth.train_frames = 20\n\
synth.test_frames = 24\n\
synth.normal_sprites = 1\n";

#[test]
fn help_exits_zero() {
    let out = amsrc(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("synth"));
}

#[test]
fn missing_subcommand_is_usage_error() {
    assert_eq!(amsrc(&[]).status.code(), Some(1));
    assert_eq!(amsrc(&["train"]).status.code(), Some(1));
}

#[test]
fn unknown_config_key_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "preset = synth\nmodel.depth = 3\n");
    let out = amsrc(&["synth", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("model.depth") && err.contains("run.conf:2"), "{err}");
}

#[test]
fn missing_config_file_is_usage_error() {
    let out = amsrc(&["synth", "--config", "/nonexistent/run.conf"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn eval_before_score_is_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out_dir = dir.path().join("out");
    let out = out_dir.to_str().unwrap();
    assert_eq!(amsrc(&["synth", "--config", &cfg, "--out", out]).status.code(), Some(0));
    let res = amsrc(&["eval", "--config", &cfg, "--out", out]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("`score`"));
}

#[test]
fn end_to_end_reports_auroc() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out_dir = dir.path().join("out");
    let out = out_dir.to_str().unwrap();
    for cmd in ["synth", "extract", "train", "score"] {
        let res = amsrc(&[cmd, "--config", &cfg, "--out", out, "--seed", "5"]);
        assert_eq!(res.status.code(), Some(0), "{cmd}: {}", String::from_utf8_lossy(&res.stderr));
    }
    let res = amsrc(&["eval", "--config", &cfg, "--out", out, "--seed", "5"]);
    assert_eq!(res.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&res.stdout);
    let line = stdout.lines().find(|l| l.starts_with("AUROC: ")).expect("AUROC line");
    let v: f64 = line["AUROC: ".len()..].parse().unwrap();
    assert!((0.0..=1.0).contains(&v));
    assert!(out_dir.join("scores").join("scores.csv").exists());
}
