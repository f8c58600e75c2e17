//! On-disk pipeline: synth -> extract -> train -> score -> eval, plus the ablation grid.
//!
//! Layout under the run root:
//!
//! ```text
//! data/{train,test}/<video_id>/%06d.png   data/labels.txt   data/dataset_hash
//! cache/{train,test}.stc   cache/{train,test}_rois.txt   cache/flow/<video_id>/%06d.flo
//! model/checkpoint.json   model/stats.txt
//! scores/scores.csv
//! eval/auroc.txt   eval/curves/<video_id>.csv
//! ablation/table.csv   ablation/<row>/...
//! runs/<timestamp>-<hash>/manifest
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use super::config::{AblationRow, FlowBackendKind, TrainConfig};
use super::optim::AdamConfig;
use super::trainer::{train_with, EpochRecord};
use crate::error::{Error, Result};
use crate::evaluation::{align, auroc, export_curves, format_labels, load_labels};
use crate::model::ModelParameters;
use crate::scoring::{
    format_frame_scores, frame_scores, load_stats, parse_frame_scores, save_stats, score_clips, FrameScore, NormStats,
};
use crate::seed::derive_seed;
use crate::stc::flow::{flow_path, write_flow};
use crate::stc::roi::save_rois;
use crate::stc::video::{load_videos, save_video};
use crate::stc::{
    extract_rois, generate_synthetic_dataset, load_clips, load_rois, save_clips, video_clips, video_flows, ClipSet,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Synth,
    Extract,
    Train,
    Score,
    Eval,
    Ablate,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Extract => "extract",
            Command::Train => "train",
            Command::Score => "score",
            Command::Eval => "eval",
            Command::Ablate => "ablate",
        }
    }
}

/// Artifact locations under one run root.
#[derive(Debug, Clone, PartialEq)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn data_train(&self) -> PathBuf {
        self.root.join("data/train")
    }
    pub fn data_test(&self) -> PathBuf {
        self.root.join("data/test")
    }
    pub fn labels(&self) -> PathBuf {
        self.root.join("data/labels.txt")
    }
    pub fn dataset_hash(&self) -> PathBuf {
        self.root.join("data/dataset_hash")
    }
    pub fn clips(&self, split: &str) -> PathBuf {
        self.root.join(format!("cache/{split}.stc"))
    }
    pub fn rois(&self, split: &str) -> PathBuf {
        self.root.join(format!("cache/{split}_rois.txt"))
    }
    pub fn flow_cache(&self) -> PathBuf {
        self.root.join("cache/flow")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("model/checkpoint.json")
    }
    pub fn stats(&self) -> PathBuf {
        self.root.join("model/stats.txt")
    }
    pub fn scores(&self) -> PathBuf {
        self.root.join("scores/scores.csv")
    }
    pub fn auroc(&self) -> PathBuf {
        self.root.join("eval/auroc.txt")
    }
    pub fn curves(&self) -> PathBuf {
        self.root.join("eval/curves")
    }
    pub fn ablation(&self) -> PathBuf {
        self.root.join("ablation")
    }
    pub fn runs(&self) -> PathBuf {
        self.root.join("runs")
    }
}

/// Record of one command invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub config: String,
    pub optimizer: Option<AdamConfig>,
    pub checkpoint: Option<String>,
    pub stats: Option<String>,
    /// Ordered metric name/value pairs.
    pub metrics: Vec<(String, String)>,
    pub wall_clock_seconds: f64,
}

impl RunManifest {
    fn new(command: Command, cfg: &TrainConfig) -> Self {
        Self {
            command: command.name().into(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            // the output root is where the manifest lives; leaving it out keeps reruns comparable
            config: cfg
                .entries()
                .into_iter()
                .filter(|(k, _)| *k != "run.out")
                .map(|(k, v)| format!("{k} = {v}\n"))
                .collect(),
            optimizer: None,
            checkpoint: None,
            stats: None,
            metrics: Vec::new(),
            wall_clock_seconds: 0.0,
        }
    }

    fn metric(&mut self, name: &str, value: impl ToString) {
        self.metrics.push((name.to_string(), value.to_string()));
    }

    /// Text rendering. `wall_clock_seconds` is the last line so that two manifests can be
    /// compared without it.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[run]");
        let _ = writeln!(s, "command = {}", self.command);
        let _ = writeln!(s, "config_hash = {}", self.config_hash);
        let _ = writeln!(s, "seed = {}", self.seed);
        if let Some(c) = &self.checkpoint {
            let _ = writeln!(s, "checkpoint = {c}");
        }
        if let Some(p) = &self.stats {
            let _ = writeln!(s, "stats = {p}");
        }
        if let Some(o) = &self.optimizer {
            let _ =
                writeln!(s, "\n[optimizer]\nkind = adam\nbeta1 = {}\nbeta2 = {}\neps = {}", o.beta1, o.beta2, o.eps);
        }
        let _ = writeln!(s, "\n[config]");
        s.push_str(&self.config);
        let _ = writeln!(s, "\n[metrics]");
        for (k, v) in &self.metrics {
            let _ = writeln!(s, "{k} = {v}");
        }
        let _ = writeln!(s, "\n[timing]\nwall_clock_seconds = {:.3}", self.wall_clock_seconds);
        s
    }

    /// Writes to a fresh `runs/<timestamp>-<hash>/manifest`, never overwriting.
    pub fn write(&self, paths: &RunPaths) -> Result<PathBuf> {
        let millis = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0);
        let base = format!("{millis:013}-{}", self.config_hash);
        let mut dir = paths.runs().join(&base);
        let mut k = 1;
        while dir.exists() {
            dir = paths.runs().join(format!("{base}.{k}"));
            k += 1;
        }
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join("manifest");
        std::fs::write(&path, self.render()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// What a command produced.
#[derive(Debug, Clone)]
pub struct CommandReport {
    pub manifest: RunManifest,
    pub manifest_path: PathBuf,
    /// Frame-level AUROC for `eval`.
    pub auroc: Option<f64>,
    /// Per-row results for `ablate`.
    pub ablation: Vec<AblationResult>,
}

fn require(path: &Path, command: &'static str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact { path: path.to_path_buf(), command })
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn rel(paths: &RunPaths, p: &Path) -> String {
    p.strip_prefix(&paths.root).unwrap_or(p).display().to_string()
}

/// Runs one pipeline stage with artifacts under `cfg.out`.
pub fn run_pipeline(command: Command, cfg: &TrainConfig) -> Result<CommandReport> {
    run_pipeline_with(command, cfg, &mut |_| {})
}

/// [`run_pipeline`] reporting progress lines (epochs, ablation rows) to `progress`.
pub fn run_pipeline_with(command: Command, cfg: &TrainConfig, progress: &mut dyn FnMut(&str)) -> Result<CommandReport> {
    cfg.validate()?;
    let paths = RunPaths::new(&cfg.out);
    let started = Instant::now();
    let mut manifest = RunManifest::new(command, cfg);
    let mut report_auroc = None;
    let mut ablation = Vec::new();
    match command {
        Command::Synth => synth(cfg, &paths, &mut manifest)?,
        Command::Extract => extract(cfg, &paths, &mut manifest)?,
        Command::Train => train_command(cfg, &paths, &mut manifest, progress)?,
        Command::Score => score_command(cfg, &paths, &mut manifest)?,
        Command::Eval => report_auroc = Some(eval_command(cfg, &paths, &mut manifest)?),
        Command::Ablate => ablation = ablate_command(cfg, &paths, &mut manifest, progress)?,
    }
    manifest.wall_clock_seconds = started.elapsed().as_secs_f64();
    let manifest_path = manifest.write(&paths)?;
    Ok(CommandReport { manifest, manifest_path, auroc: report_auroc, ablation })
}

fn synth(cfg: &TrainConfig, paths: &RunPaths, manifest: &mut RunManifest) -> Result<()> {
    let ds = generate_synthetic_dataset(derive_seed(cfg.seed, "synth"), &cfg.synth);
    for (dir, videos) in [(paths.data_train(), &ds.train), (paths.data_test(), &ds.test)] {
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        for v in videos {
            save_video(&dir, v)?;
        }
    }
    let labels = format_labels(ds.test.iter().zip(&ds.labels).map(|(v, l)| (v.video_id.as_str(), l.as_slice())));
    write_text(&paths.labels(), &labels)?;
    let hash = ds.content_hash();
    write_text(&paths.dataset_hash(), &format!("{hash}\n"))?;
    manifest.metric("dataset_hash", &hash);
    manifest.metric("train_videos", ds.train.len());
    manifest.metric("test_videos", ds.test.len());
    manifest.metric("positive_frames", ds.labels.iter().flatten().filter(|&&l| l == 1).count());
    Ok(())
}

/// Cubes of a split with the boxes and per-video flows they were cut from.
pub type SplitData = (ClipSet, Vec<crate::stc::RoiBox>, BTreeMap<String, Vec<crate::stc::FlowField>>);

/// Loads one split, obtains boxes and flows, and builds its cubes.
pub fn build_clip_set(cfg: &TrainConfig, root: &Path, rois: Option<&Path>) -> Result<SplitData> {
    let videos = load_videos(root)?;
    if videos.is_empty() {
        return Err(Error::Data(format!("no videos under {}", root.display())));
    }
    let boxes = match rois {
        Some(p) => load_rois(p)?,
        None => {
            let mut all = Vec::new();
            for v in &videos {
                all.extend(extract_rois(v, &cfg.roi)?);
            }
            all
        }
    };
    let backend = cfg.flow.backend()?;
    let mut clips = Vec::new();
    let mut flows = BTreeMap::new();
    for v in &videos {
        let f = video_flows(v, &backend)?;
        clips.extend(video_clips(v, &f, &boxes, cfg.arch.t)?);
        flows.insert(v.video_id.clone(), f);
    }
    let set = ClipSet { t: cfg.arch.t, videos: videos.iter().map(|v| (v.video_id.clone(), v.len())).collect(), clips };
    Ok((set, boxes, flows))
}

fn extract(cfg: &TrainConfig, paths: &RunPaths, manifest: &mut RunManifest) -> Result<()> {
    let splits = [
        ("train", cfg.data.train_root.clone().unwrap_or_else(|| paths.data_train()), cfg.data.train_rois.clone()),
        ("test", cfg.data.test_root.clone().unwrap_or_else(|| paths.data_test()), cfg.data.test_rois.clone()),
    ];
    for (split, root, rois) in splits {
        require(&root, "synth")?;
        let (set, boxes, flows) = build_clip_set(cfg, &root, rois.as_deref())?;
        if set.clips.is_empty() {
            return Err(Error::Data(format!("{split}: no cubes could be built from {}", root.display())));
        }
        ensure_parent(&paths.rois(split))?;
        save_rois(&paths.rois(split), &boxes)?;
        if cfg.flow.backend == FlowBackendKind::Classical {
            for (vid, fields) in &flows {
                for (k, f) in fields.iter().enumerate() {
                    write_flow(&flow_path(&paths.flow_cache(), vid, k), f)?;
                }
            }
        }
        ensure_parent(&paths.clips(split))?;
        save_clips(&paths.clips(split), &set)?;
        manifest.metric(&format!("{split}_videos"), set.videos.len());
        manifest.metric(&format!("{split}_boxes"), boxes.len());
        manifest.metric(&format!("{split}_clips"), set.clips.len());
    }
    Ok(())
}

fn load_split(paths: &RunPaths, split: &str) -> Result<ClipSet> {
    let p = paths.clips(split);
    require(&p, "extract")?;
    load_clips(&p)
}

fn epoch_line(r: &EpochRecord) -> String {
    format!("epoch {:>3} lr {:.3e} {}", r.epoch, r.learning_rate, r.mean)
}

fn train_command(
    cfg: &TrainConfig,
    paths: &RunPaths,
    manifest: &mut RunManifest,
    progress: &mut dyn FnMut(&str),
) -> Result<()> {
    let set = load_split(paths, "train")?;
    check_depth(cfg, &set)?;
    let out = train_with(cfg, &set.clips, |r| progress(&epoch_line(r)))?;
    ensure_parent(&paths.checkpoint())?;
    out.params.save(&paths.checkpoint())?;
    save_stats(&paths.stats(), &out.stats, &cfg.hash())?;
    manifest.optimizer = Some(out.adam);
    manifest.checkpoint = Some(rel(paths, &paths.checkpoint()));
    manifest.stats = Some(rel(paths, &paths.stats()));
    manifest.metric("train_clips", set.clips.len());
    for r in &out.history {
        manifest.metric(&format!("epoch.{}.lr", r.epoch), r.learning_rate);
        manifest.metric(&format!("epoch.{}.loss", r.epoch), r.mean.total);
    }
    push_stats(manifest, &out.stats);
    Ok(())
}

fn push_stats(manifest: &mut RunManifest, s: &NormStats) {
    manifest.metric("u_f", s.u_f);
    manifest.metric("delta_f", s.delta_f);
    manifest.metric("u_p", s.u_p);
    manifest.metric("delta_p", s.delta_p);
}

fn check_depth(cfg: &TrainConfig, set: &ClipSet) -> Result<()> {
    if set.t != cfg.arch.t {
        return Err(Error::Config(format!(
            "clip cache was built with t = {} but model.t = {}; rerun extract",
            set.t, cfg.arch.t
        )));
    }
    Ok(())
}

/// Frame scores of a test split under trained parameters and fitted statistics.
pub fn score_split(
    params: &ModelParameters<f32>,
    stats: &NormStats,
    cfg: &TrainConfig,
    test: &ClipSet,
) -> Result<Vec<FrameScore>> {
    let objs = score_clips(&test.clips, params, params.arch().ablation(), cfg.score_batch_size)?;
    frame_scores(&objs, stats, &cfg.score, &test.frames_universe())
}

fn score_command(cfg: &TrainConfig, paths: &RunPaths, manifest: &mut RunManifest) -> Result<()> {
    require(&paths.checkpoint(), "train")?;
    require(&paths.stats(), "train")?;
    let test = load_split(paths, "test")?;
    let params = ModelParameters::load(&paths.checkpoint())?;
    let (stats, stats_hash) = load_stats(&paths.stats())?;
    let scores = score_split(&params, &stats, cfg, &test)?;
    write_text(&paths.scores(), &format_frame_scores(&scores))?;
    manifest.checkpoint = Some(rel(paths, &paths.checkpoint()));
    manifest.stats = Some(rel(paths, &paths.stats()));
    manifest.metric("stats_config_hash", stats_hash);
    manifest.metric("scored_frames", scores.len());
    manifest.metric("scored_clips", test.clips.len());
    Ok(())
}

fn labels_path(cfg: &TrainConfig, paths: &RunPaths) -> PathBuf {
    cfg.data.labels.clone().unwrap_or_else(|| paths.labels())
}

fn eval_command(cfg: &TrainConfig, paths: &RunPaths, manifest: &mut RunManifest) -> Result<f64> {
    require(&paths.scores(), "score")?;
    let lp = labels_path(cfg, paths);
    require(&lp, "synth")?;
    let text = std::fs::read_to_string(paths.scores()).map_err(|e| Error::io(paths.scores(), e))?;
    let scores = parse_frame_scores(&text, &paths.scores().display().to_string())?;
    let labels = load_labels(&lp)?;
    let value = auroc(&align(&scores, &labels)?)?;
    export_curves(&scores, &labels, &paths.curves())?;
    write_text(&paths.auroc(), &format!("auroc={value}\n"))?;
    manifest.metric("auroc", value);
    Ok(value)
}

/// One row of the ablation grid: its toggles and AUROC, or the error that stopped it.
#[derive(Debug, Clone)]
pub struct AblationResult {
    pub row: AblationRow,
    pub auroc: std::result::Result<f64, String>,
}

/// Trains and evaluates every configured row on the same cubes and seed.
pub fn run_ablation_matrix(
    cfg: &TrainConfig,
    train_set: &ClipSet,
    test_set: &ClipSet,
    labels: &BTreeMap<String, Vec<u8>>,
    progress: &mut dyn FnMut(&str),
    mut on_row: impl FnMut(AblationRow, &Result<(ModelParameters<f32>, NormStats, Vec<FrameScore>, f64)>),
) -> Vec<AblationResult> {
    cfg.ablate_rows
        .iter()
        .map(|&row| {
            let row_cfg = cfg.with_row(row);
            let result = (|| {
                let out = train_with(&row_cfg, &train_set.clips, |r| {
                    progress(&format!("row {} {}", row.name(), epoch_line(r)))
                })?;
                let scores = score_split(&out.params, &out.stats, &row_cfg, test_set)?;
                let value = auroc(&align(&scores, labels)?)?;
                Ok((out.params, out.stats, scores, value))
            })();
            if let Ok(r) = &result {
                progress(&format!("row {} auroc {:.6}", row.name(), r.3));
            }
            on_row(row, &result);
            AblationResult { row, auroc: result.map(|r| r.3).map_err(|e: Error| e.to_string()) }
        })
        .collect()
}

fn ablate_command(
    cfg: &TrainConfig,
    paths: &RunPaths,
    manifest: &mut RunManifest,
    progress: &mut dyn FnMut(&str),
) -> Result<Vec<AblationResult>> {
    let train_set = load_split(paths, "train")?;
    let test_set = load_split(paths, "test")?;
    check_depth(cfg, &train_set)?;
    let lp = labels_path(cfg, paths);
    require(&lp, "synth")?;
    let labels = load_labels(&lp)?;
    let mut io_error = None;
    let results = run_ablation_matrix(cfg, &train_set, &test_set, &labels, progress, |row, r| {
        if let Ok((params, stats, scores, _)) = r {
            let dir = paths.ablation().join(row.name());
            let res = (|| {
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                params.save(&dir.join("checkpoint.json"))?;
                save_stats(&dir.join("stats.txt"), stats, &cfg.with_row(row).hash())?;
                write_text(&dir.join("scores.csv"), &format_frame_scores(scores))
            })();
            if let Err(e) = res {
                io_error.get_or_insert(e);
            }
        }
    });
    if let Some(e) = io_error {
        return Err(e);
    }
    let mut table = String::from("row,use_flow,use_consistency,use_fgfm,auroc\n");
    for r in &results {
        let (f, c, g) = r.row.toggles();
        let value = match &r.auroc {
            Ok(v) => v.to_string(),
            Err(e) => format!("error: {}", e.replace(',', ";")),
        };
        let _ = writeln!(table, "{},{f},{c},{g},{value}", r.row.name());
        manifest.metric(&format!("auroc.{}", r.row.name()), value);
    }
    write_text(&paths.ablation().join("table.csv"), &table)?;
    Ok(results)
}
