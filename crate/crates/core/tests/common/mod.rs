#![allow(dead_code)]

use amsrc_core::model::nn::BnMode;
use amsrc_core::model::BatchInput;
use amsrc_core::objectives::batch_objective;
use amsrc_core::stc::{StClip, CLIP_SIZE};
use amsrc_core::{ArchConfig, LossWeights, ModelParameters, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn tiny_arch() -> ArchConfig {
    ArchConfig { t: 2, levels: 3, widths: vec![4, 8, 16], use_flow: true, use_fgfm: true }
}

pub fn random_clip(rng: &mut ChaCha8Rng, t: usize, id: usize) -> StClip {
    let s = CLIP_SIZE;
    let normal = Normal::new(0.0, 1.0).unwrap();
    let frames: Vec<f32> = (0..t * s * s).map(|_| rng.gen::<f32>()).collect();
    let target: Vec<f32> = (0..s * s).map(|_| rng.gen::<f32>()).collect();
    let flows: Vec<f32> = (0..t * 2 * s * s).map(|_| normal.sample(rng) as f32).collect();
    StClip {
        input_frames: Tensor::from_vec(&[t, s, s], frames).unwrap(),
        target_frame: Tensor::from_vec(&[1, s, s], target).unwrap(),
        input_flows: Tensor::from_vec(&[t, 2, s, s], flows).unwrap(),
        video_id: "rand".into(),
        frame_index: id,
        object_id: format!("o{id}"),
    }
}

pub struct GradCheck {
    pub checked: usize,
    pub worst_rel_err: f64,
    pub failures: usize,
}

/// Compares analytic gradients of the training objective with central finite
/// differences on `samples` randomly chosen scalar parameters, in double precision.
pub fn gradient_check(seed: u64, samples: usize, tol: f64) -> GradCheck {
    let arch = tiny_arch();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params: ModelParameters<f64> = ModelParameters::<f32>::init(&arch, seed).unwrap().cast();
    // perturb the affine batch-norm terms and biases away from their trivial init
    for p in params.params_mut() {
        if p.kind != amsrc_core::model::ParamKind::Weight {
            for v in p.value.data_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
    }
    let clips: Vec<StClip> = (0..2).map(|i| random_clip(&mut rng, arch.t, i)).collect();
    let refs: Vec<&StClip> = clips.iter().collect();
    let input = BatchInput::<f64>::from_clips(&refs).unwrap();
    let ablation = arch.ablation();
    let weights = LossWeights { lambda_int: 1.0, lambda_gd: 1.0, lambda_sim: 1.0, lambda_model: 1e-3 };
    let loss = |p: &ModelParameters<f64>| -> f64 {
        batch_objective(p, &input, ablation, &weights, true, BnMode::Train).unwrap().0.total
    };
    let (_, grads, _) = batch_objective(&params, &input, ablation, &weights, true, BnMode::Train).unwrap();

    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    for _ in 0..samples {
        let pi = rng.gen_range(0..params.params().len());
        let k = rng.gen_range(0..params.params()[pi].value.len());
        let orig = params.params()[pi].value.data()[k];
        params.params_mut()[pi].value.data_mut()[k] = orig + h;
        let up = loss(&params);
        params.params_mut()[pi].value.data_mut()[k] = orig - h;
        let down = loss(&params);
        params.params_mut()[pi].value.data_mut()[k] = orig;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads[pi][k];
        let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-7);
        worst = worst.max(rel);
        if rel > tol {
            failures += 1;
        }
    }
    GradCheck { checked: samples, worst_rel_err: worst, failures }
}
