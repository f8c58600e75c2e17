//! Two-stream encoder, flow-guided fusion and skip-connected decoder.
//!
//! The batched path ([`forward_batch`] / [`backward_batch`]) is what training uses;
//! the per-clip functions wrap it with a batch of one in evaluation mode.

pub mod nn;
mod params;

pub use params::{Ablation, ArchConfig, ModelParameters, NamedParam, ParamKind};

use nn::{Act, BnCache, BnMode};
use params::ConvBnBlock;

use crate::error::{Error, Result};
use crate::stc::{StClip, CLIP_SIZE};
use crate::tensor::{Real, Tensor};

/// Bottleneck features of both streams.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPair<T = f32> {
    pub fea_frame: Tensor<T>,
    /// Absent when the flow stream is disabled.
    pub fea_flow: Option<Tensor<T>>,
}

/// Frame-encoder activations handed to the decoder, finest resolution first.
#[derive(Debug, Clone, PartialEq)]
pub struct SkipStack<T = f32> {
    pub levels: Vec<Tensor<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedFeature<T = f32> {
    pub fea_fused: Tensor<T>,
}

/// Network inputs for a batch of clips.
#[derive(Debug, Clone)]
pub struct BatchInput<T> {
    /// `t` channels of frames.
    pub frames: Act<T>,
    /// `2t` channels of flow, or `None` for the frame-only model.
    pub flows: Option<Act<T>>,
    pub target: Act<T>,
}

impl<T: Real> BatchInput<T> {
    pub fn from_clips(clips: &[&StClip]) -> Result<Self> {
        let first = clips.first().ok_or(Error::EmptyInput)?;
        let t = first.t();
        let n = clips.len();
        let s = CLIP_SIZE;
        let mut frames = Act::zeros(t, n, s, s);
        let mut flows = Act::zeros(2 * t, n, s, s);
        let mut target = Act::zeros(1, n, s, s);
        let cast = |v: &[f32]| v.iter().map(|&x| T::from_f64(x as f64)).collect::<Vec<T>>();
        for (i, clip) in clips.iter().enumerate() {
            clip.validate(t)?;
            frames.set_sample(i, &cast(clip.input_frames.data()));
            flows.set_sample(i, &cast(clip.input_flows.data()));
            target.set_sample(i, &cast(clip.target_frame.data()));
        }
        Ok(Self { frames, flows: Some(flows), target })
    }

    pub fn len(&self) -> usize {
        self.frames.n
    }

    pub fn is_empty(&self) -> bool {
        self.frames.n == 0
    }
}

#[derive(Debug, Clone)]
struct BlockTape<T> {
    input: Act<T>,
    bn: BnCache<T>,
    /// Post-ReLU output.
    out: Act<T>,
}

#[derive(Debug, Clone)]
struct DecoderTape<T> {
    up_channels: usize,
    block: BlockTape<T>,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTape<T> {
    ablation: Ablation,
    frame_enc: Vec<BlockTape<T>>,
    flow_enc: Option<Vec<BlockTape<T>>>,
    dec: Vec<DecoderTape<T>>,
    head_in: Act<T>,
}

/// Result of a batched forward pass.
#[derive(Debug, Clone)]
pub struct BatchOutput<T> {
    pub pred: Act<T>,
    pub fea_frame: Act<T>,
    pub fea_flow: Option<Act<T>>,
    pub tape: ForwardTape<T>,
}

fn block_forward<T: Real>(params: &ModelParameters<T>, b: &ConvBnBlock, x: &Act<T>, mode: BnMode) -> BlockTape<T> {
    let z = b.conv.forward(params.value(b.weight), None, x);
    let (mut out, bn) = nn::batch_norm_forward(
        &z,
        params.value(b.gamma),
        params.value(b.beta),
        params.buffer(b.running_mean),
        params.buffer(b.running_var),
        mode,
    );
    nn::relu(&mut out);
    BlockTape { input: x.clone(), bn, out }
}

fn block_backward<T: Real>(
    params: &ModelParameters<T>,
    b: &ConvBnBlock,
    tape: &BlockTape<T>,
    mut dout: Act<T>,
    grads: &mut [Vec<T>],
    want_dx: bool,
) -> Option<Act<T>> {
    nn::relu_backward(&tape.out, &mut dout);
    let (dgamma, dbeta) = two_mut(grads, b.gamma, b.beta);
    let dz = nn::batch_norm_backward(&dout, &tape.bn, params.value(b.gamma), dgamma, dbeta);
    b.conv.backward(params.value(b.weight), &tape.input, &dz, &mut grads[b.weight], None, want_dx)
}

fn two_mut<T>(v: &mut [Vec<T>], a: usize, b: usize) -> (&mut [T], &mut [T]) {
    assert!(a < b);
    let (lo, hi) = v.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}

fn encode_stream<T: Real>(
    params: &ModelParameters<T>,
    blocks: &[ConvBnBlock],
    input: &Act<T>,
    mode: BnMode,
) -> Vec<BlockTape<T>> {
    let mut tapes: Vec<BlockTape<T>> = Vec::with_capacity(blocks.len());
    for b in blocks {
        let x = tapes.last().map(|t| &t.out).unwrap_or(input);
        let tape = block_forward(params, b, x, mode);
        tapes.push(tape);
    }
    tapes
}

/// Parameter-free flow-guided fusion `frame + sigmoid(frame) * flow`.
fn fgfm<T: Real>(frame: &[T], flow: &[T]) -> Vec<T> {
    frame.iter().zip(flow).map(|(&a, &b)| a + a.sigmoid() * b).collect()
}

/// Prediction, per-level decoder tapes and the head input.
type Decoded<T> = (Act<T>, Vec<DecoderTape<T>>, Act<T>);

fn decode_batch<T: Real>(
    params: &ModelParameters<T>,
    fused: Act<T>,
    skips: &[&Act<T>],
    mode: BnMode,
) -> Result<Decoded<T>> {
    let layout = &params.layout;
    let needed = layout.dec.iter().filter_map(|d| d.skip).max().map_or(0, |s| s + 1);
    if skips.len() < needed {
        return Err(Error::Shape { context: "decoder skip stack", expected: vec![needed], got: vec![skips.len()] });
    }
    let mut x = fused;
    let mut tapes = Vec::with_capacity(layout.dec.len());
    for level in &layout.dec {
        let up = nn::upsample2(&x);
        let up_channels = up.c;
        let input = match level.skip {
            Some(s) => {
                let skip = skips[s];
                if (skip.h, skip.w, skip.n) != (up.h, up.w, up.n) {
                    return Err(Error::Shape {
                        context: "decoder skip",
                        expected: vec![up.n, up.h, up.w],
                        got: vec![skip.n, skip.h, skip.w],
                    });
                }
                nn::concat(&up, skip)
            }
            None => up,
        };
        if input.c != level.block.conv.cin {
            return Err(Error::Shape {
                context: "decoder level input channels",
                expected: vec![level.block.conv.cin],
                got: vec![input.c],
            });
        }
        let block = block_forward(params, &level.block, &input, mode);
        x = block.out.clone();
        tapes.push(DecoderTape { up_channels, block });
    }
    let mut pred = layout.head.forward(params.value(layout.head_weight), Some(params.value(layout.head_bias)), &x);
    nn::sigmoid(&mut pred);
    Ok((pred, tapes, x))
}

/// Batched forward pass. `mode` selects batch or running statistics.
pub fn forward_batch<T: Real>(
    params: &ModelParameters<T>,
    input: &BatchInput<T>,
    ablation: Ablation,
    mode: BnMode,
) -> Result<BatchOutput<T>> {
    let arch = params.arch();
    let layout = &params.layout;
    let s = CLIP_SIZE;
    if [input.frames.c, input.frames.h, input.frames.w] != [arch.t, s, s] {
        return Err(Error::Shape {
            context: "frame stream input",
            expected: vec![arch.t, s, s],
            got: vec![input.frames.c, input.frames.h, input.frames.w],
        });
    }
    let frame_enc = encode_stream(params, &layout.frame_enc, &input.frames, mode);
    let fea_frame = frame_enc.last().expect("levels >= 1").out.clone();

    let flow_enc = if ablation.use_flow {
        let blocks = layout
            .flow_enc
            .as_ref()
            .ok_or_else(|| Error::Config("flow stream requested but the model has no flow encoder".into()))?;
        let flows =
            input.flows.as_ref().ok_or_else(|| Error::Data("flow stream requested but no flows supplied".into()))?;
        if [flows.c, flows.n, flows.h, flows.w] != [2 * arch.t, input.frames.n, s, s] {
            return Err(Error::Shape {
                context: "flow stream input",
                expected: vec![2 * arch.t, input.frames.n, s, s],
                got: flows.dims().to_vec(),
            });
        }
        Some(encode_stream(params, blocks, flows, mode))
    } else {
        None
    };
    let fea_flow = flow_enc.as_ref().map(|t| t.last().expect("levels >= 1").out.clone());

    let fused = match &fea_flow {
        None => fea_frame.clone(),
        Some(flow) => {
            let data = if ablation.use_fgfm {
                fgfm(&fea_frame.data, &flow.data)
            } else {
                fea_frame.data.iter().zip(&flow.data).map(|(&a, &b)| a + b).collect()
            };
            Act { data, ..fea_frame.clone() }
        }
    };

    let skips: Vec<&Act<T>> = frame_enc[..frame_enc.len() - 1].iter().map(|t| &t.out).collect();
    let (pred, dec, head_in) = decode_batch(params, fused, &skips, mode)?;
    Ok(BatchOutput { pred, fea_frame, fea_flow, tape: ForwardTape { ablation, frame_enc, flow_enc, dec, head_in } })
}

/// Backpropagates loss gradients w.r.t. the prediction and both latents into `grads`
/// (aligned with [`ModelParameters::params`]).
pub fn backward_batch<T: Real>(
    params: &ModelParameters<T>,
    out: &BatchOutput<T>,
    dpred: &Act<T>,
    dfea_frame: Option<&Act<T>>,
    dfea_flow: Option<&Act<T>>,
    grads: &mut [Vec<T>],
) {
    let layout = &params.layout;
    let tape = &out.tape;

    let mut d = dpred.clone();
    nn::sigmoid_backward(&out.pred, &mut d);
    let (dw, db) = two_mut(grads, layout.head_weight, layout.head_bias);
    let mut dx =
        layout.head.backward(params.value(layout.head_weight), &tape.head_in, &d, dw, Some(db), true).expect("want_dx");

    let n_skips = tape.frame_enc.len() - 1;
    let mut dskips: Vec<Option<Act<T>>> = vec![None; n_skips];
    for (level, dt) in layout.dec.iter().zip(&tape.dec).rev() {
        let din = block_backward(params, &level.block, &dt.block, dx, grads, true).expect("want_dx");
        let dup = match level.skip {
            Some(s) => {
                let (dup, dskip) = nn::split(&din, dt.up_channels);
                match &mut dskips[s] {
                    Some(acc) => acc.add_assign(&dskip),
                    slot => *slot = Some(dskip),
                }
                dup
            }
            None => din,
        };
        dx = nn::upsample2_backward(&dup);
    }
    let dfused = dx;

    let mut dframe = dfused.clone();
    let mut dflow = None;
    if let Some(flow) = &out.fea_flow {
        let mut g = dfused.clone();
        if tape.ablation.use_fgfm {
            for (((df, gf), &a), &b) in dframe.data.iter_mut().zip(&mut g.data).zip(&out.fea_frame.data).zip(&flow.data)
            {
                let s = a.sigmoid();
                *df *= T::ONE + s * (T::ONE - s) * b;
                *gf *= s;
            }
        }
        if let Some(extra) = dfea_flow {
            g.add_assign(extra);
        }
        dflow = Some(g);
    }
    if let Some(extra) = dfea_frame {
        dframe.add_assign(extra);
    }

    backward_stream(params, &layout.frame_enc, &tape.frame_enc, dframe, dskips, grads);
    if let (Some(blocks), Some(tapes), Some(g)) = (&layout.flow_enc, &tape.flow_enc, dflow) {
        backward_stream(params, blocks, tapes, g, vec![None; tapes.len() - 1], grads);
    }
}

fn backward_stream<T: Real>(
    params: &ModelParameters<T>,
    blocks: &[ConvBnBlock],
    tapes: &[BlockTape<T>],
    dtop: Act<T>,
    mut dskips: Vec<Option<Act<T>>>,
    grads: &mut [Vec<T>],
) {
    let mut d = dtop;
    for l in (0..blocks.len()).rev() {
        if l < dskips.len() {
            if let Some(extra) = dskips[l].take() {
                d.add_assign(&extra);
            }
        }
        match block_backward(params, &blocks[l], &tapes[l], d, grads, l > 0) {
            Some(next) => d = next,
            None => break,
        }
    }
}

/// Folds the batch statistics of a train-mode pass into the running averages.
pub fn update_running_stats<T: Real>(params: &mut ModelParameters<T>, tape: &ForwardTape<T>) {
    let momentum = T::from_f64(nn::BN_MOMENTUM);
    let mut updates: Vec<(ConvBnBlock, &BnCache<T>, usize)> = Vec::new();
    let layout = params.layout.clone();
    for (b, t) in layout.frame_enc.iter().zip(&tape.frame_enc) {
        updates.push((*b, &t.bn, t.out.plane()));
    }
    if let (Some(blocks), Some(tapes)) = (&layout.flow_enc, &tape.flow_enc) {
        for (b, t) in blocks.iter().zip(tapes) {
            updates.push((*b, &t.bn, t.out.plane()));
        }
    }
    for (d, t) in layout.dec.iter().zip(&tape.dec) {
        updates.push((d.block, &t.block.bn, t.block.out.plane()));
    }
    for (b, cache, m) in updates {
        if cache.mode != BnMode::Train {
            continue;
        }
        // running variance tracks the unbiased estimate
        let unbias = if m > 1 { T::from_f64(m as f64 / (m as f64 - 1.0)) } else { T::ONE };
        for (r, &bm) in params.buffer_mut(b.running_mean).iter_mut().zip(&cache.batch_mean) {
            *r = (T::ONE - momentum) * *r + momentum * bm;
        }
        for (r, &bv) in params.buffer_mut(b.running_var).iter_mut().zip(&cache.batch_var) {
            *r = (T::ONE - momentum) * *r + momentum * bv * unbias;
        }
    }
}

fn act_from_tensor<T: Real>(t: &Tensor<T>, channels: usize) -> Act<T> {
    let shape = t.shape();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    Act { c: channels, n: 1, h, w, data: t.data().to_vec() }
}

fn tensor_from_act<T: Real>(a: &Act<T>) -> Tensor<T> {
    debug_assert_eq!(a.n, 1);
    Tensor::from_vec(&[a.c, a.h, a.w], a.data.clone()).expect("consistent act")
}

/// Frame stream: `[t, 32, 32]` -> nonnegative latent plus skip activations.
pub fn encode_frames<T: Real>(
    input_frames: &Tensor<T>,
    params: &ModelParameters<T>,
) -> Result<(Tensor<T>, SkipStack<T>)> {
    let t = params.arch().t;
    input_frames.expect_shape("encode_frames input", &[t, CLIP_SIZE, CLIP_SIZE])?;
    let tapes = encode_stream(params, &params.layout.frame_enc, &act_from_tensor(input_frames, t), BnMode::Eval);
    let skips = SkipStack { levels: tapes[..tapes.len() - 1].iter().map(|t| tensor_from_act(&t.out)).collect() };
    Ok((tensor_from_act(&tapes.last().expect("levels >= 1").out), skips))
}

/// Motion stream: `[t, 2, 32, 32]` -> nonnegative latent.
pub fn encode_flows<T: Real>(input_flows: &Tensor<T>, params: &ModelParameters<T>) -> Result<Tensor<T>> {
    let t = params.arch().t;
    input_flows.expect_shape("encode_flows input", &[t, 2, CLIP_SIZE, CLIP_SIZE])?;
    let blocks = params.layout.flow_enc.as_ref().ok_or_else(|| Error::Config("model has no flow encoder".into()))?;
    let tapes = encode_stream(params, blocks, &act_from_tensor(input_flows, 2 * t), BnMode::Eval);
    Ok(tensor_from_act(&tapes.last().expect("levels >= 1").out))
}

/// `fea_frame + sigmoid(fea_frame) * fea_flow`, elementwise.
pub fn fgfm_fuse<T: Real>(fea_frame: &Tensor<T>, fea_flow: &Tensor<T>) -> Result<FusedFeature<T>> {
    fea_flow.expect_shape("fgfm_fuse", fea_frame.shape())?;
    let data = fgfm(fea_frame.data(), fea_flow.data());
    Ok(FusedFeature { fea_fused: Tensor::from_vec(fea_frame.shape(), data)? })
}

/// Decoder: fused latent plus skips -> predicted frame `[1, 32, 32]` in `[0, 1]`.
pub fn decode<T: Real>(
    fused: &FusedFeature<T>,
    skips: &SkipStack<T>,
    params: &ModelParameters<T>,
) -> Result<Tensor<T>> {
    let latent = params.arch().latent_shape();
    fused.fea_fused.expect_shape("decode input", &latent)?;
    let expected_skips = params.arch().levels - 1;
    if skips.levels.len() != expected_skips {
        return Err(Error::Shape {
            context: "skip stack levels",
            expected: vec![expected_skips],
            got: vec![skips.levels.len()],
        });
    }
    let skip_acts: Vec<Act<T>> = skips.levels.iter().map(|s| act_from_tensor(s, s.shape()[0])).collect();
    let refs: Vec<&Act<T>> = skip_acts.iter().collect();
    let (pred, _, _) = decode_batch(params, act_from_tensor(&fused.fea_fused, latent[0]), &refs, BnMode::Eval)?;
    Ok(tensor_from_act(&pred))
}

/// Full prediction for one clip in evaluation mode.
pub fn forward<T: Real>(
    clip: &StClip,
    params: &ModelParameters<T>,
    ablation: Ablation,
) -> Result<(Tensor<T>, LatentPair<T>)> {
    let input = BatchInput::from_clips(&[clip])?;
    let out = forward_batch(params, &input, ablation, BnMode::Eval)?;
    Ok((
        tensor_from_act(&out.pred),
        LatentPair { fea_frame: tensor_from_act(&out.fea_frame), fea_flow: out.fea_flow.as_ref().map(tensor_from_act) },
    ))
}
