use std::path::Path;

use amsrc_core::stc::load_clips;
use amsrc_core::train::{run_pipeline, train, Command, RunPaths, TrainConfig};
use amsrc_core::{Error, ErrorClass};

/// Small enough to run the whole pipeline in a few seconds.
fn tiny_config(out: &Path) -> TrainConfig {
    let text = format!(
        "preset = synth\n\
         model.widths = 4,8,16\n\
         train.epochs = 2\n\
         train.batch_size = 16\n\
         train.seed = 3\n\
         synth.height = 48\n\
         synth.width = 48\n\
         synth.train_videos = 2\n\
         synth.test_videos = 2\n\
         synth.train_frames = 24\n\
         synth.test_frames = 30\n\
         synth.normal_sprites = 1\n\
         ablate.rows = A,E\n\
         run.out = {}\n",
        out.display()
    );
    TrainConfig::parse(&text, "tiny").unwrap()
}

fn read(p: impl AsRef<Path>) -> String {
    std::fs::read_to_string(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

fn manifests(paths: &RunPaths) -> Vec<String> {
    let mut dirs: Vec<_> = std::fs::read_dir(paths.runs()).unwrap().map(|e| e.unwrap().path()).collect();
    dirs.sort();
    dirs.iter().map(|d| read(d.join("manifest"))).collect()
}

fn without_wall_clock(manifest: &str) -> String {
    manifest.lines().filter(|l| !l.starts_with("wall_clock_seconds")).collect::<Vec<_>>().join("\n")
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let paths = RunPaths::new(&cfg.out);

    run_pipeline(Command::Synth, &cfg).unwrap();
    let hash = read(paths.dataset_hash());
    run_pipeline(Command::Extract, &cfg).unwrap();
    run_pipeline(Command::Train, &cfg).unwrap();
    run_pipeline(Command::Score, &cfg).unwrap();
    let report = run_pipeline(Command::Eval, &cfg).unwrap();
    let auroc = report.auroc.unwrap();
    assert!((0.0..=1.0).contains(&auroc));

    let scores = read(paths.scores());
    assert_eq!(scores.lines().next().unwrap(), "video_id,frame_index,score,n_objects,s_f_max,s_p_max");
    assert_eq!(scores.lines().count(), 1 + 2 * 30);
    let curves: Vec<_> = std::fs::read_dir(paths.curves()).unwrap().collect();
    assert_eq!(curves.len(), 2);
    assert!(read(paths.stats()).contains(&cfg.hash()));
    let stored = read(paths.auroc());
    assert_eq!(stored.trim().strip_prefix("auroc=").unwrap().parse::<f64>().unwrap(), auroc);
    assert_eq!(manifests(&paths).len(), 5);

    // regenerating the data is bit-identical
    run_pipeline(Command::Synth, &cfg).unwrap();
    assert_eq!(read(paths.dataset_hash()), hash);

    // nothing escapes the output root
    let entries: Vec<String> =
        std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    for e in &entries {
        assert!(["data", "cache", "model", "scores", "eval", "runs"].contains(&e.as_str()), "unexpected {e}");
    }
}

#[test]
fn reruns_produce_identical_manifests_except_wall_clock() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let paths = RunPaths::new(&cfg.out);
    run_pipeline(Command::Synth, &cfg).unwrap();
    run_pipeline(Command::Synth, &cfg).unwrap();
    let m = manifests(&paths);
    assert_eq!(m.len(), 2);
    assert_ne!(m[0], "");
    assert_eq!(without_wall_clock(&m[0]), without_wall_clock(&m[1]));
}

#[test]
fn eval_before_score_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    run_pipeline(Command::Synth, &cfg).unwrap();
    let err = run_pipeline(Command::Eval, &cfg).unwrap_err();
    assert!(matches!(err, Error::MissingArtifact { .. }), "{err}");
    assert_eq!(err.class(), ErrorClass::Data);
    assert!(err.to_string().contains("score"), "{err}");
}

#[test]
fn extract_without_data_names_the_missing_step() {
    let dir = tempfile::tempdir().unwrap();
    let err = run_pipeline(Command::Extract, &tiny_config(dir.path())).unwrap_err();
    assert_eq!(err.class(), ErrorClass::Data);
    assert!(err.to_string().contains("synth"), "{err}");
}

#[test]
fn zero_epochs_keeps_initial_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    run_pipeline(Command::Synth, &cfg).unwrap();
    run_pipeline(Command::Extract, &cfg).unwrap();
    let clips = load_clips(&RunPaths::new(&cfg.out).clips("train")).unwrap().clips;
    cfg.epochs = 0;
    let out = train(&cfg, &clips).unwrap();
    assert!(out.history.is_empty());
    let init = amsrc_core::ModelParameters::<f32>::init(&cfg.arch, amsrc_core::derive_seed(cfg.seed, "init")).unwrap();
    for (a, b) in out.params.params().iter().zip(init.params()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
    assert!(out.stats.delta_f > 0.0 && out.stats.delta_p > 0.0);
}

#[test]
fn training_loss_halves_on_a_fixed_subset() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    run_pipeline(Command::Synth, &cfg).unwrap();
    run_pipeline(Command::Extract, &cfg).unwrap();
    let mut clips = load_clips(&RunPaths::new(&cfg.out).clips("train")).unwrap().clips;
    assert!(clips.len() >= 32);
    clips.truncate(32);
    cfg.epochs = 40;
    cfg.batch_size = 2;
    let out = train(&cfg, &clips).unwrap();
    let first = out.history.first().unwrap().mean.total;
    let last = out.history.last().unwrap().mean.total;
    assert!(last <= 0.5 * first, "loss {first} -> {last}");
}

#[test]
fn ablation_writes_one_result_per_row() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.epochs = 1;
    for c in [Command::Synth, Command::Extract] {
        run_pipeline(c, &cfg).unwrap();
    }
    let report = run_pipeline(Command::Ablate, &cfg).unwrap();
    assert_eq!(report.ablation.len(), 2);
    for r in &report.ablation {
        assert!(r.auroc.is_ok(), "{:?}", r);
    }
    let table = read(RunPaths::new(&cfg.out).ablation().join("table.csv"));
    assert_eq!(table.lines().count(), 3);
    assert!(RunPaths::new(&cfg.out).ablation().join("A").join("checkpoint.json").exists());
}
