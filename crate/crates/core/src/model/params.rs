use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::nn::Conv2d;
use crate::error::{Error, Result};
use crate::stc::CLIP_SIZE;
use crate::tensor::{Real, Tensor};

/// Architecture hyperparameters stored alongside the weights.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    /// Number of input frames (and flow maps) per clip.
    pub t: usize,
    /// Number of stride-2 down levels in each encoder.
    pub levels: usize,
    /// Output channels per encoder level.
    pub widths: Vec<usize>,
    pub use_flow: bool,
    pub use_fgfm: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self { t: 4, levels: 3, widths: vec![32, 64, 128], use_flow: true, use_fgfm: true }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t == 0 {
            return Err(Error::Config("model.t must be >= 1".into()));
        }
        if self.levels == 0 || CLIP_SIZE >> self.levels == 0 {
            return Err(Error::Config(format!("model.levels must be in 1..={}", CLIP_SIZE.trailing_zeros())));
        }
        if self.widths.len() != self.levels {
            return Err(Error::Config(format!(
                "model.widths has {} entries but model.levels is {}",
                self.widths.len(),
                self.levels
            )));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config("model.widths entries must be >= 1".into()));
        }
        Ok(())
    }

    /// Bottleneck latent shape `[C, h, w]`.
    pub fn latent_shape(&self) -> [usize; 3] {
        let side = CLIP_SIZE >> self.levels;
        [self.widths[self.levels - 1], side, side]
    }

    pub fn ablation(&self) -> Ablation {
        Ablation { use_flow: self.use_flow, use_fgfm: self.use_fgfm }
    }
}

/// Forward-pass switches for the component ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub use_flow: bool,
    pub use_fgfm: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    BnGamma,
    BnBeta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedParam<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

/// Indices of one conv + batch-norm + ReLU block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvBnBlock {
    pub conv: Conv2d,
    pub weight: usize,
    pub gamma: usize,
    pub beta: usize,
    pub running_mean: usize,
    pub running_var: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct DecoderLevel {
    pub block: ConvBnBlock,
    /// Index into the frame encoder's skip stack concatenated at this level.
    pub skip: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Layout {
    pub frame_enc: Vec<ConvBnBlock>,
    pub flow_enc: Option<Vec<ConvBnBlock>>,
    pub dec: Vec<DecoderLevel>,
    pub head: Conv2d,
    pub head_weight: usize,
    pub head_bias: usize,
}

/// All learnable tensors of both encoders and the decoder, plus batch-norm buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters<T = f32> {
    arch: ArchConfig,
    params: Vec<NamedParam<T>>,
    buffers: Vec<(String, Tensor<T>)>,
    pub(crate) layout: Layout,
}

struct Builder<T> {
    params: Vec<NamedParam<T>>,
    buffers: Vec<(String, Tensor<T>)>,
}

impl<T: Real> Builder<T> {
    fn param(&mut self, name: String, kind: ParamKind, shape: &[usize]) -> usize {
        let value = match kind {
            ParamKind::BnGamma => Tensor::full(shape, T::ONE),
            _ => Tensor::zeros(shape),
        };
        self.params.push(NamedParam { name, kind, value });
        self.params.len() - 1
    }

    fn buffer(&mut self, name: String, shape: &[usize], fill: T) -> usize {
        self.buffers.push((name, Tensor::full(shape, fill)));
        self.buffers.len() - 1
    }

    fn conv_bn(&mut self, prefix: &str, conv: Conv2d) -> ConvBnBlock {
        ConvBnBlock {
            conv,
            weight: self.param(format!("{prefix}.conv.weight"), ParamKind::Weight, &conv.weight_shape()),
            gamma: self.param(format!("{prefix}.bn.gamma"), ParamKind::BnGamma, &[conv.cout]),
            beta: self.param(format!("{prefix}.bn.beta"), ParamKind::BnBeta, &[conv.cout]),
            running_mean: self.buffer(format!("{prefix}.bn.running_mean"), &[conv.cout], T::ZERO),
            running_var: self.buffer(format!("{prefix}.bn.running_var"), &[conv.cout], T::ONE),
        }
    }

    fn encoder(&mut self, prefix: &str, in_channels: usize, widths: &[usize]) -> Vec<ConvBnBlock> {
        let mut cin = in_channels;
        widths
            .iter()
            .enumerate()
            .map(|(l, &cout)| {
                let conv = Conv2d { cin, cout, kernel: 3, stride: 2, pad: 1 };
                cin = cout;
                self.conv_bn(&format!("{prefix}.{l}"), conv)
            })
            .collect()
    }
}

/// Parameters, buffers and the index layout that addresses them.
type Built<T> = (Vec<NamedParam<T>>, Vec<(String, Tensor<T>)>, Layout);

fn build<T: Real>(arch: &ArchConfig) -> Built<T> {
    let mut b = Builder { params: Vec::new(), buffers: Vec::new() };
    let frame_enc = b.encoder("frame_enc", arch.t, &arch.widths);
    let flow_enc = arch.use_flow.then(|| b.encoder("flow_enc", 2 * arch.t, &arch.widths));

    // Up-level i doubles the resolution; skip s = levels - 2 - i is the frame-encoder
    // output at that resolution. The final level reaches full size with no skip.
    let mut dec = Vec::with_capacity(arch.levels);
    let mut cin = arch.widths[arch.levels - 1];
    for i in 0..arch.levels {
        let skip = (arch.levels as isize - 2 - i as isize >= 0).then(|| arch.levels - 2 - i);
        let (skip_channels, cout) = match skip {
            Some(s) => (arch.widths[s], arch.widths[s]),
            None => (0, arch.widths[0]),
        };
        let conv = Conv2d { cin: cin + skip_channels, cout, kernel: 3, stride: 1, pad: 1 };
        dec.push(DecoderLevel { block: b.conv_bn(&format!("dec.{i}"), conv), skip });
        cin = cout;
    }
    let head = Conv2d { cin, cout: 1, kernel: 1, stride: 1, pad: 0 };
    let head_weight = b.param("head.weight".into(), ParamKind::Weight, &head.weight_shape());
    let head_bias = b.param("head.bias".into(), ParamKind::Bias, &[1]);
    let layout = Layout { frame_enc, flow_enc, dec, head, head_weight, head_bias };
    (b.params, b.buffers, layout)
}

impl<T: Real> ModelParameters<T> {
    /// Kaiming-uniform weights with bound `1/sqrt(fan_in)` (leaky-ReLU slope sqrt(5), the
    /// usual default for conv layers), zero biases, unit/zero batch-norm affine terms.
    pub fn init(arch: &ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let (mut params, buffers, layout) = build::<T>(arch);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in params.iter_mut().filter(|p| p.kind == ParamKind::Weight) {
            let fan_in: usize = p.value.shape()[1..].iter().product();
            let bound = 1.0 / (fan_in as f64).sqrt();
            let uniform = Uniform::new_inclusive(-bound, bound);
            for v in p.value.data_mut() {
                *v = T::from_f64(uniform.sample(&mut rng));
            }
        }
        Ok(Self { arch: arch.clone(), params, buffers, layout })
    }

    /// Every learnable tensor set to zero (batch-norm gammas included).
    pub fn zeros(arch: &ArchConfig) -> Result<Self> {
        let mut p = Self::init(arch, 0)?;
        for t in &mut p.params {
            t.value.data_mut().fill(T::ZERO);
        }
        Ok(p)
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn params(&self) -> &[NamedParam<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedParam<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&NamedParam<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut NamedParam<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn buffers(&self) -> &[(String, Tensor<T>)] {
        &self.buffers
    }

    pub(crate) fn value(&self, idx: usize) -> &[T] {
        self.params[idx].value.data()
    }

    pub(crate) fn buffer(&self, idx: usize) -> &[T] {
        self.buffers[idx].1.data()
    }

    pub(crate) fn buffer_mut(&mut self, idx: usize) -> &mut [T] {
        self.buffers[idx].1.data_mut()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.all_finite()) && self.buffers.iter().all(|(_, b)| b.all_finite())
    }

    /// Zero-filled gradient buffers aligned with [`ModelParameters::params`].
    pub fn zero_grads(&self) -> Vec<Vec<T>> {
        self.params.iter().map(|p| vec![T::ZERO; p.value.len()]).collect()
    }

    pub fn cast<U: Real>(&self) -> ModelParameters<U> {
        ModelParameters {
            arch: self.arch.clone(),
            params: self
                .params
                .iter()
                .map(|p| NamedParam { name: p.name.clone(), kind: p.kind, value: p.value.cast() })
                .collect(),
            buffers: self.buffers.iter().map(|(n, b)| (n.clone(), b.cast())).collect(),
            layout: self.layout.clone(),
        }
    }
}

const CHECKPOINT_FORMAT: &str = "amsrc-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct StoredTensor {
    name: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    kind: Option<ParamKind>,
    shape: Vec<usize>,
    /// Little-endian f32 bytes, hex encoded.
    data: String,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    arch: ArchConfig,
    params: Vec<StoredTensor>,
    buffers: Vec<StoredTensor>,
}

fn encode(t: &Tensor<f32>) -> String {
    let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    hex::encode(bytes)
}

fn decode(s: &StoredTensor) -> Result<Tensor<f32>> {
    let bytes = hex::decode(&s.data).map_err(|e| Error::Data(format!("tensor {}: {e}", s.name)))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Data(format!("tensor {}: truncated data", s.name)));
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Tensor::from_vec(&s.shape, data)
}

impl ModelParameters<f32> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            arch: self.arch.clone(),
            params: self
                .params
                .iter()
                .map(|p| StoredTensor {
                    name: p.name.clone(),
                    kind: Some(p.kind),
                    shape: p.value.shape().to_vec(),
                    data: encode(&p.value),
                })
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|(n, b)| StoredTensor { name: n.clone(), kind: None, shape: b.shape().to_vec(), data: encode(b) })
                .collect(),
        };
        let text = serde_json::to_string(&ckpt)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "{}: unsupported checkpoint {} v{}",
                path.display(),
                ckpt.format,
                ckpt.version
            )));
        }
        let mut model = Self::init(&ckpt.arch, 0)?;
        if ckpt.params.len() != model.params.len() || ckpt.buffers.len() != model.buffers.len() {
            return Err(Error::Data(format!("{}: tensor count does not match architecture", path.display())));
        }
        for (slot, stored) in model.params.iter_mut().zip(&ckpt.params) {
            let value = decode(stored)?;
            if stored.name != slot.name || value.shape() != slot.value.shape() {
                return Err(Error::Data(format!("{}: unexpected tensor {}", path.display(), stored.name)));
            }
            slot.value = value;
        }
        for ((name, slot), stored) in model.buffers.iter_mut().zip(&ckpt.buffers) {
            let value = decode(stored)?;
            if &stored.name != name || value.shape() != slot.shape() {
                return Err(Error::Data(format!("{}: unexpected buffer {}", path.display(), stored.name)));
            }
            *slot = value;
        }
        Ok(model)
    }
}
