mod common;

use amsrc_core::model::nn::BnMode;
use amsrc_core::model::{forward_batch, BatchInput};
use amsrc_core::{
    decode, encode_flows, encode_frames, fgfm_fuse, forward, Ablation, ArchConfig, ModelParameters, Tensor,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn default_clip(seed: u64) -> amsrc_core::StClip {
    common::random_clip(&mut ChaCha8Rng::seed_from_u64(seed), 4, 0)
}

#[test]
fn default_latent_shape() {
    let arch = ArchConfig::default();
    let params = ModelParameters::<f32>::init(&arch, 1).unwrap();
    let clip = default_clip(3);
    let (f, skips) = encode_frames(&clip.input_frames, &params).unwrap();
    assert_eq!(f.shape(), &[128, 4, 4]);
    assert_eq!(skips.levels.len(), 2);
    let g = encode_flows(&clip.input_flows, &params).unwrap();
    assert_eq!(g.shape(), &[128, 4, 4]);
}

#[test]
fn zero_model_predicts_half() {
    let params = ModelParameters::<f32>::zeros(&ArchConfig::default()).unwrap();
    let clip = default_clip(4);
    let (pred, latents) = forward(&clip, &params, Ablation { use_flow: true, use_fgfm: true }).unwrap();
    assert!(latents.fea_frame.data().iter().all(|&v| v == 0.0));
    assert!(pred.data().iter().all(|&v| v == 0.5));
    assert_eq!(pred.shape(), &[1, 32, 32]);
}

#[test]
fn fgfm_identities() {
    let f = Tensor::from_vec(&[2], vec![0.0f32, 2.0]).unwrap();
    let zero = Tensor::zeros(&[2]);
    assert_eq!(fgfm_fuse(&f, &zero).unwrap().fea_fused, f);
    let v = Tensor::from_vec(&[2], vec![1.0f32, -3.0]).unwrap();
    let z = Tensor::zeros(&[2]);
    assert_eq!(fgfm_fuse(&z, &v).unwrap().fea_fused.data(), &[0.5, -1.5]);
    assert!(fgfm_fuse(&f, &Tensor::zeros(&[3])).is_err());
}

#[test]
fn forward_is_deterministic_and_matches_composed_api() {
    let arch = ArchConfig::default();
    let params = ModelParameters::<f32>::init(&arch, 9).unwrap();
    let clip = default_clip(5);
    let a = forward(&clip, &params, arch.ablation()).unwrap();
    let b = forward(&clip, &params, arch.ablation()).unwrap();
    assert_eq!(a, b);

    let (f, skips) = encode_frames(&clip.input_frames, &params).unwrap();
    let g = encode_flows(&clip.input_flows, &params).unwrap();
    let pred = decode(&fgfm_fuse(&f, &g).unwrap(), &skips, &params).unwrap();
    assert_eq!(pred, a.0);
}

#[test]
fn batch_results_match_single_clip_results_in_eval_mode() {
    let arch = ArchConfig::default();
    let params = ModelParameters::<f32>::init(&arch, 2).unwrap();
    let clips: Vec<_> = (0..3).map(|i| default_clip(20 + i)).collect();
    let refs: Vec<_> = clips.iter().collect();
    let batch = forward_batch(&params, &BatchInput::from_clips(&refs).unwrap(), arch.ablation(), BnMode::Eval).unwrap();
    for (i, clip) in clips.iter().enumerate() {
        let (pred, _) = forward(clip, &params, arch.ablation()).unwrap();
        let diff = pred.data().iter().zip(batch.pred.sample(i)).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(diff < 1e-6, "sample {i}: {diff}");
    }
}

#[test]
fn frame_only_model_has_no_flow_parameters() {
    let arch = ArchConfig { use_flow: false, ..ArchConfig::default() };
    let params = ModelParameters::<f32>::init(&arch, 1).unwrap();
    assert!(params.params().iter().all(|p| !p.name.starts_with("flow_enc")));
    let clip = default_clip(1);
    let (_, latents) = forward(&clip, &params, arch.ablation()).unwrap();
    assert!(latents.fea_flow.is_none());
    assert!(encode_flows(&clip.input_flows, &params).is_err());
}

#[test]
fn additive_fusion_differs_from_gated_fusion() {
    let arch = ArchConfig::default();
    let params = ModelParameters::<f32>::init(&arch, 1).unwrap();
    let clip = default_clip(2);
    let gated = forward(&clip, &params, Ablation { use_flow: true, use_fgfm: true }).unwrap();
    let added = forward(&clip, &params, Ablation { use_flow: true, use_fgfm: false }).unwrap();
    assert_eq!(gated.1, added.1);
    assert_ne!(gated.0, added.0);
}

#[test]
fn wrong_input_shape_is_rejected() {
    let params = ModelParameters::<f32>::init(&ArchConfig::default(), 1).unwrap();
    assert!(encode_frames(&Tensor::zeros(&[3, 32, 32]), &params).is_err());
    assert!(encode_flows(&Tensor::zeros(&[4, 2, 16, 32]), &params).is_err());
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let arch = ArchConfig::default();
    let params = ModelParameters::<f32>::init(&arch, 11).unwrap();
    let path = dir.path().join("model.ckpt");
    params.save(&path).unwrap();
    let loaded = ModelParameters::load(&path).unwrap();
    let clip = default_clip(6);
    assert_eq!(forward(&clip, &params, arch.ablation()).unwrap(), forward(&clip, &loaded, arch.ablation()).unwrap());
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let r = common::gradient_check(17, 60, 1e-3);
    assert_eq!(r.failures, 0, "worst relative error {}", r.worst_rel_err);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]
    #[test]
    fn latents_are_nonnegative(seed in 0u64..1000) {
        let arch = common::tiny_arch();
        let params = ModelParameters::<f32>::init(&arch, seed).unwrap();
        let clip = common::random_clip(&mut ChaCha8Rng::seed_from_u64(seed), arch.t, 0);
        let (pred, lat) = forward(&clip, &params, arch.ablation()).unwrap();
        prop_assert!(lat.fea_frame.data().iter().all(|&v| v >= 0.0));
        prop_assert!(lat.fea_flow.unwrap().data().iter().all(|&v| v >= 0.0));
        prop_assert!(pred.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
