use amsrc_core::train::{AblationRow, FlowBackendKind, Preset, TrainConfig};
use amsrc_core::Error;

#[test]
fn defaults_follow_the_synth_preset() {
    let cfg = TrainConfig::default();
    assert_eq!(cfg.preset, Preset::Synth);
    assert_eq!((cfg.batch_size, cfg.epochs), (64, 40));
    assert_eq!((cfg.score.w_f, cfg.score.w_p), (0.5, 0.5));
    assert_eq!(cfg.learning_rate, 2e-4);
    assert_eq!(cfg.decay_factor, 0.8);
    assert_eq!(cfg.decay_every_epochs, 10);
    cfg.validate().unwrap();
}

#[test]
fn dataset_presets() {
    let cases = [
        ("ped2", 128, 60, [1.0, 1.0, 1.0, 1.0], (1.0, 0.01)),
        ("avenue", 128, 40, [1.0, 1.0, 1.0, 1.0], (0.2, 0.8)),
        ("shanghaitech", 256, 40, [1.0, 1.0, 10.0, 1.0], (0.4, 0.6)),
    ];
    for (name, batch, epochs, lambdas, (w_f, w_p)) in cases {
        let cfg = TrainConfig::parse(&format!("preset = {name}\n"), "mem").unwrap();
        assert_eq!((cfg.batch_size, cfg.epochs), (batch, epochs), "{name}");
        let l = cfg.loss;
        assert_eq!([l.lambda_int, l.lambda_gd, l.lambda_sim, l.lambda_model], lambdas, "{name}");
        assert_eq!((cfg.score.w_f, cfg.score.w_p), (w_f, w_p), "{name}");
    }
}

#[test]
fn keys_override_preset_regardless_of_order() {
    let cfg =
        TrainConfig::parse("train.epochs = 3\npreset = ped2\n# comment\nmodel.widths = 4, 8, 16\n", "mem").unwrap();
    assert_eq!(cfg.epochs, 3);
    assert_eq!(cfg.batch_size, 128);
    assert_eq!(cfg.arch.widths, vec![4, 8, 16]);
}

#[test]
fn unknown_key_is_rejected_with_line_number() {
    let err = TrainConfig::parse("train.epochs = 3\nmodel.depth = 5\n", "run.conf").unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("run.conf:2") && msg.contains("model.depth"), "{msg}");
}

#[test]
fn malformed_values_are_rejected() {
    for text in [
        "train.epochs = many",
        "model.use_flow = maybe",
        "loss.reduction = sum",
        "flow.backend = flownet",
        "train.learning_rate = 0",
        "train.decay_factor = 1.5",
        "train.batch_size = 0",
        "loss.lambda_sim = -1",
        "model.widths = 8,16",
        "ablate.rows = F",
        "train.epochs = 1\ntrain.epochs = 2",
        "no equals sign",
    ] {
        assert!(TrainConfig::parse(text, "mem").is_err(), "{text:?} accepted");
    }
}

#[test]
fn rendered_config_parses_back_identically() {
    let mut cfg =
        TrainConfig::parse("preset = avenue\nflow.backend = precomputed\nflow.root = /flows\n", "mem").unwrap();
    cfg.ablate_rows = vec![AblationRow::A, AblationRow::E];
    cfg.synth.anomaly_rate = 0.125;
    let back = TrainConfig::parse(&cfg.to_text(), "mem").unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.hash(), cfg.hash());
    assert_eq!(back.flow.backend, FlowBackendKind::Precomputed);
}

#[test]
fn hash_ignores_output_root_only() {
    let a = TrainConfig::default();
    let mut b = a.clone();
    b.out = "elsewhere".into();
    assert_eq!(a.hash(), b.hash());
    b.seed = 1;
    assert_ne!(a.hash(), b.hash());
}

#[test]
fn learning_rate_schedule() {
    let cfg = TrainConfig::default();
    assert_eq!(cfg.lr_at_epoch(0), 2e-4);
    assert_eq!(cfg.lr_at_epoch(9), 2e-4);
    assert!((cfg.lr_at_epoch(10) - 1.6e-4).abs() < 1e-18);
    assert!((cfg.lr_at_epoch(19) - 1.6e-4).abs() < 1e-18);
    assert!((cfg.lr_at_epoch(20) - 1.28e-4).abs() < 1e-18);
    assert!((cfg.lr_at_epoch(29) - 1.28e-4).abs() < 1e-18);
}

#[test]
fn ablation_rows_toggle_components() {
    assert_eq!(AblationRow::E.toggles(), (true, true, true));
    assert_eq!(AblationRow::A.toggles(), (false, false, false));
    let cfg = TrainConfig::default().with_row(AblationRow::D);
    assert!(cfg.arch.use_flow && !cfg.arch.use_fgfm && cfg.use_consistency);
    let cfg = TrainConfig::default().with_row(AblationRow::C);
    assert!(cfg.arch.use_flow && cfg.arch.use_fgfm && !cfg.use_consistency);
}

#[test]
fn precomputed_backend_needs_a_root() {
    let cfg = TrainConfig::parse("flow.backend = precomputed\n", "mem").unwrap();
    assert!(matches!(cfg.flow.backend(), Err(Error::Config(_))));
}

#[test]
fn shipped_config_files_parse() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["synth", "ped2", "avenue", "shanghaitech"] {
        let cfg = TrainConfig::load(&dir.join(format!("{name}.conf"))).unwrap();
        assert_eq!(cfg.preset.name(), name);
    }
}
