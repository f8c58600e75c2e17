//! Video anomaly detection from the consistency between appearance and motion
//! representations.
//!
//! A frame encoder and a flow encoder map an object-centric spatio-temporal cube to
//! latents trained to agree (cosine consistency); a parameter-free gate fuses them and
//! a skip-connected decoder predicts the next crop. At test time the latent
//! inconsistency and the prediction error are standardized against normal training
//! data and combined into one anomaly score per object, then maxed per frame.

pub mod error;
pub mod evaluation;
pub mod model;
pub mod objectives;
pub mod scoring;
mod seed;
pub mod stc;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorClass, Result};
pub use evaluation::{auroc, export_curves, LabeledScores};
pub use model::{
    decode, encode_flows, encode_frames, fgfm_fuse, forward, Ablation, ArchConfig, FusedFeature, LatentPair,
    ModelParameters, SkipStack,
};
pub use objectives::{
    consistency_loss, gradient_loss, intensity_loss, regularization_loss, total_loss, LossComponents, LossReport,
    LossWeights,
};
pub use scoring::{
    fit_norm_stats, frame_scores, fuse_scores, object_scores, FrameScore, NormStats, ObjectScore, ScoreWeights,
};
pub use seed::derive_seed;
pub use stc::{build_stc, compute_flow, extract_rois, generate_synthetic_dataset, load_rois, StClip, VideoSequence};
pub use tensor::{Real, Tensor};
pub use train::{run_ablation_matrix, run_pipeline, train, AblationRow, Command, RunManifest, TrainConfig};
