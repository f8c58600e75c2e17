//! The training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::optim::{Adam, AdamConfig};
use crate::error::{Error, Result};
use crate::model::nn::BnMode;
use crate::model::{update_running_stats, BatchInput, ModelParameters};
use crate::objectives::{batch_objective, LossReport};
use crate::scoring::{fit_norm_stats, score_clips, NormStats, ObjectScore};
use crate::seed::derive_seed;
use crate::stc::StClip;

/// Mean loss terms and learning rate of one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub mean: LossReport,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParameters<f32>,
    pub stats: NormStats,
    pub history: Vec<EpochRecord>,
    /// Scores of the training clips under the final parameters.
    pub train_scores: Vec<ObjectScore>,
    pub adam: AdamConfig,
}

/// Trains from a seeded initialization, then fits normalization statistics on the
/// training clips in evaluation mode.
pub fn train(cfg: &TrainConfig, clips: &[StClip]) -> Result<TrainOutcome> {
    train_with(cfg, clips, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(cfg: &TrainConfig, clips: &[StClip], mut on_epoch: impl FnMut(&EpochRecord)) -> Result<TrainOutcome> {
    cfg.validate()?;
    if clips.is_empty() {
        return Err(Error::Data("no training clips".into()));
    }
    let ablation = cfg.ablation();
    let mut params = ModelParameters::<f32>::init(&cfg.arch, derive_seed(cfg.seed, "init"))?;
    let adam_cfg = AdamConfig::default();
    let mut adam = Adam::new(&params, adam_cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "shuffle"));
    let mut order: Vec<usize> = (0..clips.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at_epoch(epoch);
        order.shuffle(&mut rng);
        let mut sum = [0.0f64; 5];
        let mut batches = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&StClip> = idx.iter().map(|&i| &clips[i]).collect();
            let input = BatchInput::<f32>::from_clips(&batch)?;
            let (report, grads, out) =
                batch_objective(&params, &input, ablation, &cfg.loss, cfg.use_consistency, BnMode::Train).map_err(
                    |e| match e {
                        Error::NonFiniteTerm { term } => {
                            Error::NonFiniteLoss { step, epoch, report: format!("{term} term") }
                        }
                        other => other,
                    },
                )?;
            if !report.total.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { step, epoch, report: report.to_string() });
            }
            adam.step(&mut params, &grads, lr);
            update_running_stats(&mut params, &out.tape);
            for (s, v) in sum.iter_mut().zip([report.l_int, report.l_gd, report.l_sim, report.l_reg, report.total]) {
                *s += v;
            }
            batches += 1;
            step += 1;
        }
        let b = batches as f64;
        let record = EpochRecord {
            epoch,
            learning_rate: lr,
            mean: LossReport {
                l_int: sum[0] / b,
                l_gd: sum[1] / b,
                l_sim: sum[2] / b,
                l_reg: sum[3] / b,
                total: sum[4] / b,
            },
        };
        on_epoch(&record);
        history.push(record);
    }

    if !params.all_finite() {
        return Err(Error::NonFiniteLoss { step, epoch: cfg.epochs, report: "parameters became non-finite".into() });
    }
    let train_scores = score_clips(clips, &params, ablation, cfg.score_batch_size)?;
    let stats = fit_norm_stats(&train_scores)?;
    Ok(TrainOutcome { params, stats, history, train_scores, adam: adam_cfg })
}
