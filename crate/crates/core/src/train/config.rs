//! Flat `key = value` run configuration with named presets.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Ablation, ArchConfig};
use crate::objectives::LossWeights;
use crate::scoring::ScoreWeights;
use crate::stc::{BlockMatchParams, FlowBackend, ForegroundParams, SynthConfig};

/// One row of the component ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum AblationRow {
    A,
    B,
    C,
    D,
    E,
}

impl AblationRow {
    pub const ALL: [AblationRow; 5] = [Self::A, Self::B, Self::C, Self::D, Self::E];

    /// `(use_flow, use_consistency, use_fgfm)`
    pub fn toggles(self) -> (bool, bool, bool) {
        match self {
            Self::A => (false, false, false),
            Self::B => (true, false, false),
            Self::C => (true, false, true),
            Self::D => (true, true, false),
            Self::E => (true, true, true),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::A => "A",
            Self::B => "B",
            Self::C => "C",
            Self::D => "D",
            Self::E => "E",
        }
    }
}

impl FromStr for AblationRow {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown ablation row {s:?} (expected A-E)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Ped2,
    Avenue,
    ShanghaiTech,
    Synth,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Ped2 => "ped2",
            Preset::Avenue => "avenue",
            Preset::ShanghaiTech => "shanghaitech",
            Preset::Synth => "synth",
        }
    }

    /// `(batch_size, epochs, loss weights, score weights)`
    pub fn values(self) -> (usize, usize, LossWeights, ScoreWeights) {
        let lw = |sim: f64| LossWeights { lambda_int: 1.0, lambda_gd: 1.0, lambda_sim: sim, lambda_model: 1.0 };
        let sw = |w_f, w_p| ScoreWeights { w_f, w_p };
        match self {
            Preset::Ped2 => (128, 60, lw(1.0), sw(1.0, 0.01)),
            Preset::Avenue => (128, 40, lw(1.0), sw(0.2, 0.8)),
            Preset::ShanghaiTech => (256, 40, lw(10.0), sw(0.4, 0.6)),
            Preset::Synth => (64, 40, lw(1.0), sw(0.5, 0.5)),
        }
    }
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [Preset::Ped2, Preset::Avenue, Preset::ShanghaiTech, Preset::Synth]
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowBackendKind {
    Classical,
    Precomputed,
}

/// Input locations. Unset roots default to the output of `synth` under the run root.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DataConfig {
    pub train_root: Option<PathBuf>,
    pub test_root: Option<PathBuf>,
    pub train_rois: Option<PathBuf>,
    pub test_rois: Option<PathBuf>,
    pub labels: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowConfig {
    pub backend: FlowBackendKind,
    pub root: Option<PathBuf>,
    pub block_match: BlockMatchParams,
}

impl FlowConfig {
    pub fn backend(&self) -> Result<FlowBackend> {
        match self.backend {
            FlowBackendKind::Classical => Ok(FlowBackend::Classical(self.block_match.clone())),
            FlowBackendKind::Precomputed => Ok(FlowBackend::Precomputed {
                root: self
                    .root
                    .clone()
                    .ok_or_else(|| Error::Config("flow.backend = precomputed needs flow.root".into()))?,
            }),
        }
    }
}

/// Everything a run needs: model, losses, schedule, scoring, data and flow settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub preset: Preset,
    pub arch: ArchConfig,
    pub loss: LossWeights,
    pub learning_rate: f64,
    pub decay_factor: f64,
    pub decay_every_epochs: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub use_consistency: bool,
    pub score: ScoreWeights,
    pub score_batch_size: usize,
    pub data: DataConfig,
    pub flow: FlowConfig,
    pub roi: ForegroundParams,
    pub synth: SynthConfig,
    pub ablate_rows: Vec<AblationRow>,
    pub out: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::from_preset(Preset::Synth)
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true/false, got {v:?}"))),
    }
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').filter(|s| !s.trim().is_empty()).map(|s| parse(key, s.trim())).collect()
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    pub fn from_preset(preset: Preset) -> Self {
        let (batch_size, epochs, loss, score) = preset.values();
        let mut arch = ArchConfig::default();
        if preset == Preset::Synth {
            arch.widths = vec![16, 32, 64];
        }
        Self {
            preset,
            arch,
            loss,
            learning_rate: 2e-4,
            decay_factor: 0.8,
            decay_every_epochs: 10,
            batch_size,
            epochs,
            seed: 0,
            use_consistency: true,
            score,
            score_batch_size: 64,
            data: DataConfig::default(),
            flow: FlowConfig {
                backend: FlowBackendKind::Classical,
                root: None,
                block_match: BlockMatchParams::default(),
            },
            roi: ForegroundParams::default(),
            synth: SynthConfig::default(),
            ablate_rows: AblationRow::ALL.to_vec(),
            out: PathBuf::from("out"),
        }
    }

    pub fn ablation(&self) -> Ablation {
        self.arch.ablation()
    }

    /// Applies the `(use_flow, use_consistency, use_fgfm)` toggles of an ablation row.
    pub fn with_row(&self, row: AblationRow) -> Self {
        let (use_flow, use_consistency, use_fgfm) = row.toggles();
        let mut c = self.clone();
        c.arch.use_flow = use_flow;
        c.arch.use_fgfm = use_fgfm;
        c.use_consistency = use_consistency;
        c
    }

    /// Learning rate for `epoch`: step decay by `decay_factor` every `decay_every_epochs`.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.learning_rate * self.decay_factor.powi((epoch / self.decay_every_epochs) as i32)
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.loss.validate()?;
        self.score.validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("train.learning_rate must be > 0");
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad("train.decay_factor must be in (0, 1]");
        }
        if self.decay_every_epochs == 0 {
            return bad("train.decay_every_epochs must be >= 1");
        }
        if self.batch_size == 0 || self.score_batch_size == 0 {
            return bad("batch sizes must be >= 1");
        }
        if self.flow.block_match.window.is_multiple_of(2)
            || self.flow.block_match.levels == 0
            || self.flow.block_match.radius < 0
        {
            return bad("flow.window must be odd, flow.levels >= 1, flow.radius >= 0");
        }
        if !(0.0..=1.0).contains(&self.synth.anomaly_rate) {
            return bad("synth.anomaly_rate must be in [0, 1]");
        }
        if self.ablate_rows.is_empty() {
            return bad("ablate.rows must name at least one row");
        }
        Ok(())
    }

    /// Parses a config file body. `preset` is applied first wherever it appears; every
    /// other key overrides it. Unknown and repeated keys are errors.
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse { path: source.to_string(), line: i + 1, msg };
            let (k, v) = line.split_once('=').ok_or_else(|| err("expected key = value".into()))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(err(format!("duplicate key {k}")));
            }
            entries.push((i + 1, k.to_string(), v.to_string()));
        }
        let preset = match entries.iter().find(|e| e.1 == "preset") {
            Some(e) => e.2.parse()?,
            None => Preset::Synth,
        };
        let mut cfg = Self::from_preset(preset);
        for (line, k, v) in &entries {
            cfg.set(k, v).map_err(|e| match e {
                Error::Config(msg) => Error::Parse { path: source.to_string(), line: *line, msg },
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Sets one key. Does not re-validate.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let bm = &mut self.flow.block_match;
        let sy = &mut self.synth;
        match key {
            "preset" => self.preset = v.parse()?,
            "model.t" => self.arch.t = parse(key, v)?,
            "model.levels" => self.arch.levels = parse(key, v)?,
            "model.widths" => self.arch.widths = parse_list(key, v)?,
            "model.use_flow" => self.arch.use_flow = parse_bool(key, v)?,
            "model.use_fgfm" => self.arch.use_fgfm = parse_bool(key, v)?,
            "loss.lambda_int" => self.loss.lambda_int = parse(key, v)?,
            "loss.lambda_gd" => self.loss.lambda_gd = parse(key, v)?,
            "loss.lambda_sim" => self.loss.lambda_sim = parse(key, v)?,
            "loss.lambda_model" => self.loss.lambda_model = parse(key, v)?,
            "loss.reduction" => {
                if v != "mean" {
                    return Err(Error::Config(format!("loss.reduction must be \"mean\", got {v:?}")));
                }
            }
            "train.learning_rate" => self.learning_rate = parse(key, v)?,
            "train.decay_factor" => self.decay_factor = parse(key, v)?,
            "train.decay_every_epochs" => self.decay_every_epochs = parse(key, v)?,
            "train.batch_size" => self.batch_size = parse(key, v)?,
            "train.epochs" => self.epochs = parse(key, v)?,
            "train.seed" => self.seed = parse(key, v)?,
            "train.use_consistency" => self.use_consistency = parse_bool(key, v)?,
            "score.w_f" => self.score.w_f = parse(key, v)?,
            "score.w_p" => self.score.w_p = parse(key, v)?,
            "score.batch_size" => self.score_batch_size = parse(key, v)?,
            "data.train_root" => self.data.train_root = opt_path(v),
            "data.test_root" => self.data.test_root = opt_path(v),
            "data.train_rois" => self.data.train_rois = opt_path(v),
            "data.test_rois" => self.data.test_rois = opt_path(v),
            "data.labels" => self.data.labels = opt_path(v),
            "flow.backend" => {
                self.flow.backend = match v {
                    "classical" => FlowBackendKind::Classical,
                    "precomputed" => FlowBackendKind::Precomputed,
                    _ => return Err(Error::Config(format!("flow.backend: expected classical|precomputed, got {v:?}"))),
                }
            }
            "flow.root" => self.flow.root = opt_path(v),
            "flow.window" => bm.window = parse(key, v)?,
            "flow.radius" => bm.radius = parse(key, v)?,
            "flow.levels" => bm.levels = parse(key, v)?,
            "flow.half_pixel" => bm.half_pixel = parse_bool(key, v)?,
            "roi.threshold" => self.roi.threshold = parse(key, v)?,
            "roi.min_area" => self.roi.min_area = parse(key, v)?,
            "roi.merge_gap" => self.roi.merge_gap = parse(key, v)?,
            "roi.pad" => self.roi.pad = parse(key, v)?,
            "synth.height" => sy.height = parse(key, v)?,
            "synth.width" => sy.width = parse(key, v)?,
            "synth.train_videos" => sy.train_videos = parse(key, v)?,
            "synth.test_videos" => sy.test_videos = parse(key, v)?,
            "synth.train_frames" => sy.train_frames = parse(key, v)?,
            "synth.test_frames" => sy.test_frames = parse(key, v)?,
            "synth.normal_sprites" => sy.normal_sprites = parse(key, v)?,
            "synth.sprite_size" => sy.sprite_size = parse(key, v)?,
            "synth.anomaly_rate" => sy.anomaly_rate = parse(key, v)?,
            "synth.min_anomaly_start" => sy.min_anomaly_start = parse(key, v)?,
            "ablate.rows" => self.ablate_rows = parse_list(key, v)?,
            "run.out" => self.out = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its resolved value, in a fixed order. Parsing the
    /// `key = value` rendering of this list reproduces the config.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let bm = &self.flow.block_match;
        let sy = &self.synth;
        vec![
            ("preset", self.preset.name().into()),
            ("model.t", self.arch.t.to_string()),
            ("model.levels", self.arch.levels.to_string()),
            ("model.widths", join(&self.arch.widths)),
            ("model.use_flow", self.arch.use_flow.to_string()),
            ("model.use_fgfm", self.arch.use_fgfm.to_string()),
            ("loss.lambda_int", self.loss.lambda_int.to_string()),
            ("loss.lambda_gd", self.loss.lambda_gd.to_string()),
            ("loss.lambda_sim", self.loss.lambda_sim.to_string()),
            ("loss.lambda_model", self.loss.lambda_model.to_string()),
            ("loss.reduction", "mean".into()),
            ("train.learning_rate", self.learning_rate.to_string()),
            ("train.decay_factor", self.decay_factor.to_string()),
            ("train.decay_every_epochs", self.decay_every_epochs.to_string()),
            ("train.batch_size", self.batch_size.to_string()),
            ("train.epochs", self.epochs.to_string()),
            ("train.seed", self.seed.to_string()),
            ("train.use_consistency", self.use_consistency.to_string()),
            ("score.w_f", self.score.w_f.to_string()),
            ("score.w_p", self.score.w_p.to_string()),
            ("score.batch_size", self.score_batch_size.to_string()),
            ("data.train_root", show_path(&self.data.train_root)),
            ("data.test_root", show_path(&self.data.test_root)),
            ("data.train_rois", show_path(&self.data.train_rois)),
            ("data.test_rois", show_path(&self.data.test_rois)),
            ("data.labels", show_path(&self.data.labels)),
            (
                "flow.backend",
                match self.flow.backend {
                    FlowBackendKind::Classical => "classical".into(),
                    FlowBackendKind::Precomputed => "precomputed".into(),
                },
            ),
            ("flow.root", show_path(&self.flow.root)),
            ("flow.window", bm.window.to_string()),
            ("flow.radius", bm.radius.to_string()),
            ("flow.levels", bm.levels.to_string()),
            ("flow.half_pixel", bm.half_pixel.to_string()),
            ("roi.threshold", self.roi.threshold.to_string()),
            ("roi.min_area", self.roi.min_area.to_string()),
            ("roi.merge_gap", self.roi.merge_gap.to_string()),
            ("roi.pad", self.roi.pad.to_string()),
            ("synth.height", sy.height.to_string()),
            ("synth.width", sy.width.to_string()),
            ("synth.train_videos", sy.train_videos.to_string()),
            ("synth.test_videos", sy.test_videos.to_string()),
            ("synth.train_frames", sy.train_frames.to_string()),
            ("synth.test_frames", sy.test_frames.to_string()),
            ("synth.normal_sprites", sy.normal_sprites.to_string()),
            ("synth.sprite_size", sy.sprite_size.to_string()),
            ("synth.anomaly_rate", sy.anomaly_rate.to_string()),
            ("synth.min_anomaly_start", sy.min_anomaly_start.to_string()),
            ("ablate.rows", self.ablate_rows.iter().map(|r| r.name()).collect::<Vec<_>>().join(",")),
            ("run.out", self.out.display().to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Short SHA-256 of every setting except the output root.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if k != "run.out" {
                h.update(k.as_bytes());
                h.update(b"=");
                h.update(v.as_bytes());
                h.update(b"\n");
            }
        }
        hex::encode(&h.finalize()[..8])
    }
}
