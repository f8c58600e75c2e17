//! Training losses: intensity, gradient-difference, appearance-motion consistency,
//! weight regularization, and their weighted total.
//!
//! Pixel losses are means (not sums) so the weights do not depend on crop size.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::nn::{Act, BnMode};
use crate::model::{backward_batch, forward_batch, Ablation, BatchInput, BatchOutput, ModelParameters, ParamKind};
use crate::tensor::{Real, Tensor};

/// Norm stabilizer of the cosine distance.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_int: f64,
    pub lambda_gd: f64,
    pub lambda_sim: f64,
    pub lambda_model: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_int: 1.0, lambda_gd: 1.0, lambda_sim: 1.0, lambda_model: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_int, self.lambda_gd, self.lambda_sim, self.lambda_model];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0, got {all:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub l_int: f64,
    pub l_gd: f64,
    pub l_sim: f64,
    pub l_reg: f64,
    pub total: f64,
}

impl fmt::Display for LossReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "total={:.6} int={:.6} gd={:.6} sim={:.6} reg={:.6}",
            self.total, self.l_int, self.l_gd, self.l_sim, self.l_reg
        )
    }
}

fn same_shape<T: Real>(context: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    b.expect_shape(context, a.shape())
}

/// `(loss, dloss/dpred)` of the mean squared error.
pub(crate) fn intensity_with_grad<T: Real>(pred: &[T], target: &[T]) -> (T, Vec<T>) {
    let n = T::from_f64(pred.len() as f64);
    let two = T::from_f64(2.0);
    let mut loss = T::ZERO;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &x)| {
            let d = p - x;
            loss += d * d;
            two * d / n
        })
        .collect();
    (loss / n, grad)
}

/// `(loss, dloss/dpred)` of the gradient-difference loss over an `h x w` image.
pub(crate) fn gradient_with_grad<T: Real>(pred: &[T], target: &[T], h: usize, w: usize) -> (T, Vec<T>) {
    let n = T::from_f64((h * w) as f64);
    let mut loss = T::ZERO;
    let mut grad = vec![T::ZERO; pred.len()];
    let mut term = |a: usize, b: usize, grad: &mut [T]| {
        let dp = pred[a] - pred[b];
        let dx = target[a] - target[b];
        let r = dp.abs() - dx.abs();
        loss += r.abs();
        // d|r|/dpred[a] = sign(r) * sign(dp)
        let g = r.signum0() * dp.signum0() / n;
        grad[a] += g;
        grad[b] -= g;
    };
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            if i > 0 {
                term(p, p - w, &mut grad);
            }
            if j > 0 {
                term(p, p - 1, &mut grad);
            }
        }
    }
    (loss / n, grad)
}

/// `(loss, dloss/df, dloss/dg)` of the stabilized cosine distance.
pub(crate) fn cosine_with_grad<T: Real>(f: &[T], g: &[T]) -> (T, Vec<T>, Vec<T>) {
    let eps = T::from_f64(COSINE_EPS);
    let dot: T = f.iter().zip(g).map(|(&a, &b)| a * b).sum();
    let nf = f.iter().map(|&a| a * a).sum::<T>().sqrt();
    let ng = g.iter().map(|&b| b * b).sum::<T>().sqrt();
    let (df_, dg_) = (nf + eps, ng + eps);
    let denom = df_ * dg_;
    let loss = T::ONE - dot / denom;
    // d(dot/((|f|+e)(|g|+e)))/df = g/denom - dot * f / (|f| (|f|+e)^2 (|g|+e))
    let cf = if nf > T::ZERO { dot / (nf * df_ * df_ * dg_) } else { T::ZERO };
    let cg = if ng > T::ZERO { dot / (ng * dg_ * dg_ * df_) } else { T::ZERO };
    let grad_f = f.iter().zip(g).map(|(&a, &b)| -(b / denom - cf * a)).collect();
    let grad_g = f.iter().zip(g).map(|(&a, &b)| -(a / denom - cg * b)).collect();
    (loss, grad_f, grad_g)
}

pub(crate) fn cosine_distance<T: Real>(f: &[T], g: &[T]) -> T {
    let eps = T::from_f64(COSINE_EPS);
    let dot: T = f.iter().zip(g).map(|(&a, &b)| a * b).sum();
    let nf = f.iter().map(|&a| a * a).sum::<T>().sqrt();
    let ng = g.iter().map(|&b| b * b).sum::<T>().sqrt();
    T::ONE - dot / ((nf + eps) * (ng + eps))
}

/// Mean squared error between prediction and ground truth.
pub fn intensity_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    same_shape("intensity_loss", pred, target)?;
    Ok(mean_squared_error(pred.data(), target.data()))
}

pub(crate) fn mean_squared_error<T: Real>(pred: &[T], target: &[T]) -> T {
    let sum: T = pred.iter().zip(target).map(|(&p, &x)| (p - x) * (p - x)).sum();
    sum / T::from_f64(pred.len() as f64)
}

/// Mean over pixel positions of the absolute differences between predicted and true
/// absolute neighbour differences (up and left neighbours; missing ones omitted).
pub fn gradient_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    same_shape("gradient_loss", pred, target)?;
    let shape = pred.shape();
    if shape.len() < 2 {
        return Err(Error::Shape {
            context: "gradient_loss needs a 2-D image",
            expected: vec![1, 1],
            got: shape.to_vec(),
        });
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let planes = pred.len() / (h * w);
    let mut acc = T::ZERO;
    for p in 0..planes {
        let r = p * h * w..(p + 1) * h * w;
        acc += gradient_with_grad(&pred.data()[r.clone()], &target.data()[r], h, w).0;
    }
    Ok(acc / T::from_f64(planes as f64))
}

/// `1 - <f, g> / ((|f| + eps)(|g| + eps))` over the flattened tensors.
pub fn consistency_loss<T: Real>(fea_frame: &Tensor<T>, fea_flow: &Tensor<T>) -> Result<T> {
    same_shape("consistency_loss", fea_frame, fea_flow)?;
    Ok(cosine_distance(fea_frame.data(), fea_flow.data()))
}

/// Sum of squared multiplicative weights; biases and batch-norm affine terms excluded.
pub fn regularization_loss<T: Real>(params: &ModelParameters<T>) -> T {
    params
        .params()
        .iter()
        .filter(|p| p.kind == ParamKind::Weight)
        .flat_map(|p| p.value.data().iter())
        .map(|&v| v * v)
        .sum()
}

/// The four unweighted loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossComponents {
    pub l_int: f64,
    pub l_gd: f64,
    pub l_sim: f64,
    pub l_reg: f64,
}

/// Weighted sum of the components; errors on any non-finite term.
pub fn total_loss(c: LossComponents, weights: &LossWeights) -> Result<LossReport> {
    for (term, v) in
        [("intensity", c.l_int), ("gradient", c.l_gd), ("consistency", c.l_sim), ("regularization", c.l_reg)]
    {
        if !v.is_finite() {
            return Err(Error::NonFiniteTerm { term });
        }
    }
    Ok(LossReport {
        l_int: c.l_int,
        l_gd: c.l_gd,
        l_sim: c.l_sim,
        l_reg: c.l_reg,
        total: weights.lambda_int * c.l_int
            + weights.lambda_gd * c.l_gd
            + weights.lambda_sim * c.l_sim
            + weights.lambda_model * c.l_reg,
    })
}

/// Loss, parameter gradients and forward output for one batch. When
/// `use_consistency` is false the consistency term is reported but carries zero weight.
pub fn batch_objective<T: Real>(
    params: &ModelParameters<T>,
    input: &BatchInput<T>,
    ablation: Ablation,
    weights: &LossWeights,
    use_consistency: bool,
    mode: BnMode,
) -> Result<(LossReport, Vec<Vec<T>>, BatchOutput<T>)> {
    let out = forward_batch(params, input, ablation, mode)?;
    let n = input.len();
    let nf = T::from_f64(n as f64);
    let (h, w) = (out.pred.h, out.pred.w);
    let mut effective = *weights;
    if !use_consistency {
        effective.lambda_sim = 0.0;
    }
    let lam_int = T::from_f64(effective.lambda_int);
    let lam_gd = T::from_f64(effective.lambda_gd);
    let lam_sim = T::from_f64(effective.lambda_sim);

    let mut dpred = Act::zeros(1, n, h, w);
    let (mut l_int, mut l_gd, mut l_sim) = (T::ZERO, T::ZERO, T::ZERO);
    for i in 0..n {
        let p = out.pred.sample(i);
        let x = input.target.sample(i);
        let (li, gi) = intensity_with_grad(&p, &x);
        let (lg, gg) = gradient_with_grad(&p, &x, h, w);
        l_int += li;
        l_gd += lg;
        let g: Vec<T> = gi.iter().zip(&gg).map(|(&a, &b)| (lam_int * a + lam_gd * b) / nf).collect();
        dpred.set_sample(i, &g);
    }

    let mut dframe = None;
    let mut dflow = None;
    if let Some(flow) = &out.fea_flow {
        let (c, hh, ww) = (flow.c, flow.h, flow.w);
        let mut df = Act::zeros(c, n, hh, ww);
        let mut dg = Act::zeros(c, n, hh, ww);
        for i in 0..n {
            let (ls, gf, gg) = cosine_with_grad(&out.fea_frame.sample(i), &flow.sample(i));
            l_sim += ls;
            let scale = lam_sim / nf;
            df.set_sample(i, &gf.iter().map(|&v| v * scale).collect::<Vec<_>>());
            dg.set_sample(i, &gg.iter().map(|&v| v * scale).collect::<Vec<_>>());
        }
        if effective.lambda_sim > 0.0 {
            dframe = Some(df);
            dflow = Some(dg);
        }
    }

    let l_reg = regularization_loss(params);
    let report = total_loss(
        LossComponents {
            l_int: (l_int / nf).to_f64(),
            l_gd: (l_gd / nf).to_f64(),
            l_sim: (l_sim / nf).to_f64(),
            l_reg: l_reg.to_f64(),
        },
        &effective,
    )?;

    let mut grads = params.zero_grads();
    backward_batch(params, &out, &dpred, dframe.as_ref(), dflow.as_ref(), &mut grads);
    if effective.lambda_model > 0.0 {
        let two_lambda = T::from_f64(2.0 * effective.lambda_model);
        for (g, p) in grads.iter_mut().zip(params.params()) {
            if p.kind == ParamKind::Weight {
                for (gv, &v) in g.iter_mut().zip(p.value.data()) {
                    *gv += two_lambda * v;
                }
            }
        }
    }
    Ok((report, grads, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn intensity_examples() {
        let x = Tensor::<f64>::full(&[1, 32, 32], 0.3);
        assert_eq!(intensity_loss(&x, &x).unwrap(), 0.0);
        let shifted = x.map(|v| v + 0.5);
        assert!((intensity_loss(&shifted, &x).unwrap() - 0.25).abs() < 1e-12);
        let mut one = x.clone();
        one.data_mut()[17] += 1.0;
        assert!((intensity_loss(&one, &x).unwrap() - 1.0 / 1024.0).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = Tensor::<f64>::zeros(&[1, 4, 4]);
        let b = Tensor::<f64>::zeros(&[1, 4, 5]);
        assert!(intensity_loss(&a, &b).is_err());
        assert!(gradient_loss(&a, &b).is_err());
        assert!(consistency_loss(&a, &b).is_err());
    }

    #[test]
    fn gradient_loss_constant_images_are_zero() {
        let a = Tensor::<f64>::full(&[1, 8, 8], 0.2);
        let b = Tensor::<f64>::full(&[1, 8, 8], 0.9);
        assert_eq!(gradient_loss(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn cosine_examples() {
        let f = t(&[3], vec![1.0, 2.0, 3.0]);
        assert!(consistency_loss(&f, &f).unwrap().abs() < 1e-6);
        let a = t(&[2], vec![1.0, 0.0]);
        let b = t(&[2], vec![0.0, 3.0]);
        assert!((consistency_loss(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let neg = f.map(|v| -v);
        assert!((consistency_loss(&f, &neg).unwrap() - 2.0).abs() < 1e-6);
        let z = Tensor::<f64>::zeros(&[4]);
        assert_eq!(consistency_loss(&z, &z).unwrap(), 1.0);
    }

    #[test]
    fn total_composition_and_errors() {
        let r = total_loss(LossComponents { l_int: 0.2, l_gd: 0.1, l_sim: 0.3, l_reg: 0.05 }, &LossWeights::default())
            .unwrap();
        assert!((r.total - 0.65).abs() < 1e-12);
        let bad = total_loss(LossComponents { l_gd: f64::NAN, ..LossComponents::default() }, &LossWeights::default());
        assert!(matches!(bad, Err(Error::NonFiniteTerm { term: "gradient" })));
    }

    fn finite_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], i: usize) -> f64 {
        let h = 1e-6;
        let mut a = x.to_vec();
        let mut b = x.to_vec();
        a[i] += h;
        b[i] -= h;
        (f(&a) - f(&b)) / (2.0 * h)
    }

    #[test]
    fn analytic_loss_gradients_match_finite_differences() {
        let (h, w) = (4, 5);
        let pred: Vec<f64> = (0..h * w).map(|i| ((i * 7 % 11) as f64) / 11.0 + 0.013 * i as f64).collect();
        let target: Vec<f64> = (0..h * w).map(|i| ((i * 5 % 13) as f64) / 13.0).collect();
        let (_, gi) = intensity_with_grad(&pred, &target);
        let (_, gg) = gradient_with_grad(&pred, &target, h, w);
        for i in 0..pred.len() {
            let fi = finite_diff(|p| intensity_with_grad(p, &target).0, &pred, i);
            let fg = finite_diff(|p| gradient_with_grad(p, &target, h, w).0, &pred, i);
            assert!((fi - gi[i]).abs() < 1e-6);
            assert!((fg - gg[i]).abs() < 1e-6, "{i}: {fg} vs {}", gg[i]);
        }
        let f: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        let g: Vec<f64> = (0..12).map(|i| (i as f64 * 0.71).cos().abs()).collect();
        let (_, df, dg) = cosine_with_grad(&f, &g);
        for i in 0..f.len() {
            let nf = finite_diff(|x| cosine_distance(x, &g), &f, i);
            let ng = finite_diff(|x| cosine_distance(&f, x), &g, i);
            assert!((nf - df[i]).abs() < 1e-7);
            assert!((ng - dg[i]).abs() < 1e-7);
        }
    }
}
