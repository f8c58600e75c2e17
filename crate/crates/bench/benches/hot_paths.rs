use amsrc_core::model::nn::BnMode;
use amsrc_core::model::BatchInput;
use amsrc_core::objectives::batch_objective;
use amsrc_core::stc::flow::block_match;
use amsrc_core::stc::{BlockMatchParams, Frame, StClip, CLIP_SIZE};
use amsrc_core::{auroc, forward, ArchConfig, LabeledScores, LossWeights, ModelParameters, Tensor};
use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn clip(rng: &mut ChaCha8Rng, t: usize) -> StClip {
    let s = CLIP_SIZE;
    let mut v = |n: usize| (0..n).map(|_| rng.gen::<f32>()).collect::<Vec<_>>();
    StClip {
        input_frames: Tensor::from_vec(&[t, s, s], v(t * s * s)).unwrap(),
        target_frame: Tensor::from_vec(&[1, s, s], v(s * s)).unwrap(),
        input_flows: Tensor::from_vec(&[t, 2, s, s], v(t * 2 * s * s)).unwrap(),
        video_id: "bench".into(),
        frame_index: 0,
        object_id: "o0".into(),
    }
}

fn model(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for widths in [vec![16, 32, 64], vec![32, 64, 128]] {
        let arch = ArchConfig { widths: widths.clone(), ..ArchConfig::default() };
        let params = ModelParameters::<f32>::init(&arch, 1).unwrap();
        let one = clip(&mut rng, arch.t);
        c.bench_function(&format!("forward/single/{widths:?}"), |b| {
            b.iter(|| forward(black_box(&one), &params, arch.ablation()).unwrap())
        });
        let clips: Vec<StClip> = (0..16).map(|_| clip(&mut rng, arch.t)).collect();
        let refs: Vec<&StClip> = clips.iter().collect();
        let input = BatchInput::from_clips(&refs).unwrap();
        c.bench_function(&format!("train_step/batch16/{widths:?}"), |b| {
            b.iter(|| {
                batch_objective(&params, &input, arch.ablation(), &LossWeights::default(), true, BnMode::Train).unwrap()
            })
        });
    }
}

fn flow(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (h, w) = (64, 64);
    let a = Frame::new(h, w, (0..h * w).map(|_| rng.gen::<f32>()).collect()).unwrap();
    let b = a.shifted(2, -1, 0.0);
    let params = BlockMatchParams::default();
    c.bench_function("block_match/64x64", |bench| bench.iter(|| block_match(black_box(&a), &b, &params)));
}

fn evaluation(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 100_000;
    let data = LabeledScores {
        scores: (0..n).map(|_| rng.gen::<f64>()).collect(),
        labels: (0..n).map(|i| (i % 4 == 0) as u8).collect(),
    };
    c.bench_function("auroc/100k", |b| b.iter_batched(|| data.clone(), |d| auroc(&d).unwrap(), BatchSize::LargeInput));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = model, flow, evaluation
}
criterion_main!(benches);
