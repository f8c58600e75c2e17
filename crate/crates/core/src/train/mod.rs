//! Configuration, optimizer, training loop and the command pipeline.

mod config;
mod optim;
mod pipeline;
mod trainer;

pub use config::{AblationRow, DataConfig, FlowBackendKind, FlowConfig, Preset, TrainConfig};
pub use optim::{Adam, AdamConfig};
pub use pipeline::{
    build_clip_set, run_ablation_matrix, run_pipeline, run_pipeline_with, score_split, AblationResult, Command,
    CommandReport, RunManifest, RunPaths, SplitData,
};
pub use trainer::{train, train_with, EpochRecord, TrainOutcome};
