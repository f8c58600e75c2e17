//! Batched layer kernels with hand-written backward passes.
//!
//! Activations are stored channel-major (`[c][n][h][w]`) so a convolution over the
//! whole batch is a single GEMM and per-channel batch statistics are contiguous.

use crate::tensor::Real;

/// A batch of feature maps, laid out `[c][n][h][w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Act<T> {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Act<T> {
    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        Self { c, n, h, w, data: vec![T::ZERO; c * n * h * w] }
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.c, self.n, self.h, self.w]
    }

    /// Elements per channel (`n * h * w`).
    pub fn plane(&self) -> usize {
        self.n * self.h * self.w
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    /// Copies sample `i` out as a `[c][h][w]` row-major buffer.
    pub fn sample(&self, i: usize) -> Vec<T> {
        let hw = self.h * self.w;
        let mut out = Vec::with_capacity(self.c * hw);
        for c in 0..self.c {
            let start = (c * self.n + i) * hw;
            out.extend_from_slice(&self.data[start..start + hw]);
        }
        out
    }

    /// Writes a `[c][h][w]` buffer into sample slot `i`.
    pub fn set_sample(&mut self, i: usize, src: &[T]) {
        let hw = self.h * self.w;
        debug_assert_eq!(src.len(), self.c * hw);
        for c in 0..self.c {
            let start = (c * self.n + i) * hw;
            self.data[start..start + hw].copy_from_slice(&src[c * hw..(c + 1) * hw]);
        }
    }

    pub fn add_assign(&mut self, other: &Act<T>) {
        debug_assert_eq!(self.dims(), other.dims());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// 2-D convolution with square kernel, symmetric zero padding and integer stride.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn weight_shape(&self) -> [usize; 4] {
        [self.cout, self.cin, self.kernel, self.kernel]
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        ((h + 2 * self.pad - self.kernel) / self.stride + 1, (w + 2 * self.pad - self.kernel) / self.stride + 1)
    }

    fn rows(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }

    /// Unfolds sample `n` of `x` into a `rows x (oh * ow)` matrix.
    fn im2col<T: Real>(&self, x: &Act<T>, n: usize, oh: usize, ow: usize, cols: &mut [T]) {
        let (k, s, p) = (self.kernel, self.stride, self.pad as isize);
        let hw = oh * ow;
        cols.fill(T::ZERO);
        for ci in 0..self.cin {
            let src = &x.data[(ci * x.n + n) * x.h * x.w..(ci * x.n + n + 1) * x.h * x.w];
            for ky in 0..k {
                for kx in 0..k {
                    let r = (ci * k + ky) * k + kx;
                    let row = &mut cols[r * hw..(r + 1) * hw];
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * x.w..(iy as usize + 1) * x.w];
                        let dst = &mut row[oy * ow..(oy + 1) * ow];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - p;
                            if ix >= 0 && ix < x.w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Folds a `rows x (oh * ow)` gradient matrix back into sample `n` of `dx`.
    fn col2im<T: Real>(&self, dcols: &[T], dx: &mut Act<T>, n: usize, oh: usize, ow: usize) {
        let (k, s, p) = (self.kernel, self.stride, self.pad as isize);
        let hw = oh * ow;
        let (h, w, n_batch) = (dx.h, dx.w, dx.n);
        for ci in 0..self.cin {
            let base = (ci * n_batch + n) * h * w;
            for ky in 0..k {
                for kx in 0..k {
                    let r = (ci * k + ky) * k + kx;
                    let row = &dcols[r * hw..(r + 1) * hw];
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut dx.data[base + iy as usize * w..base + (iy as usize + 1) * w];
                        let src = &row[oy * ow..(oy + 1) * ow];
                        for (ox, &g) in src.iter().enumerate() {
                            let ix = (ox * s + kx) as isize - p;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += g;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Convolves every sample of `x`. The unfolded input is rebuilt per sample in a
    /// small scratch buffer, so memory stays proportional to one sample.
    pub fn forward<T: Real>(&self, weight: &[T], bias: Option<&[T]>, x: &Act<T>) -> Act<T> {
        assert_eq!(x.c, self.cin, "conv input channels");
        let (oh, ow) = self.out_hw(x.h, x.w);
        let hw = oh * ow;
        let p = x.n * hw;
        let rows = self.rows();
        let mut y = Act::zeros(self.cout, x.n, oh, ow);
        let mut cols = vec![T::ZERO; rows * hw];
        for n in 0..x.n {
            self.im2col(x, n, oh, ow, &mut cols);
            T::gemm(self.cout, rows, hw, T::ONE, weight, rows, 1, &cols, hw, 1, T::ZERO, &mut y.data[n * hw..], p, 1);
        }
        if let Some(b) = bias {
            for (co, &bv) in b.iter().enumerate() {
                for v in &mut y.data[co * p..(co + 1) * p] {
                    *v += bv;
                }
            }
        }
        y
    }

    /// Accumulates parameter gradients given the forward input `x` and returns the input
    /// gradient when `want_dx`.
    #[allow(clippy::too_many_arguments)]
    pub fn backward<T: Real>(
        &self,
        weight: &[T],
        x: &Act<T>,
        dy: &Act<T>,
        dweight: &mut [T],
        dbias: Option<&mut [T]>,
        want_dx: bool,
    ) -> Option<Act<T>> {
        let (oh, ow) = (dy.h, dy.w);
        let hw = oh * ow;
        let p = dy.n * hw;
        let rows = self.rows();
        if let Some(db) = dbias {
            for (co, g) in db.iter_mut().enumerate() {
                *g += dy.data[co * p..(co + 1) * p].iter().copied().sum::<T>();
            }
        }
        let mut cols = vec![T::ZERO; rows * hw];
        let mut dcols = vec![T::ZERO; if want_dx { rows * hw } else { 0 }];
        let mut dx = want_dx.then(|| Act::zeros(x.c, x.n, x.h, x.w));
        for n in 0..dy.n {
            let dy_n = &dy.data[n * hw..];
            self.im2col(x, n, oh, ow, &mut cols);
            T::gemm(self.cout, hw, rows, T::ONE, dy_n, p, 1, &cols, 1, hw, T::ONE, dweight, rows, 1);
            if let Some(dx) = dx.as_mut() {
                T::gemm(rows, self.cout, hw, T::ONE, weight, 1, rows, dy_n, p, 1, T::ZERO, &mut dcols, hw, 1);
                self.col2im(&dcols, dx, n, oh, ow);
            }
        }
        dx
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// How batch normalization treats statistics on a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with the batch's own statistics.
    Train,
    /// Normalize with the stored running statistics.
    Eval,
}

/// Saved state of one batch-norm application.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub mode: BnMode,
    /// Batch mean/variance per channel (train mode only), for running-stat updates.
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

pub fn batch_norm_forward<T: Real>(
    x: &Act<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    mode: BnMode,
) -> (Act<T>, BnCache<T>) {
    let m = x.plane();
    let eps = T::from_f64(BN_EPS);
    let mut y = x.clone();
    let mut xhat = vec![T::ZERO; x.data.len()];
    let mut inv_std = vec![T::ZERO; x.c];
    let mut batch_mean = Vec::new();
    let mut batch_var = Vec::new();
    for c in 0..x.c {
        let xs = x.channel(c);
        let (mean, var) = match mode {
            BnMode::Train => {
                let mf = T::from_f64(m as f64);
                let mean = xs.iter().copied().sum::<T>() / mf;
                let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / mf;
                batch_mean.push(mean);
                batch_var.push(var);
                (mean, var)
            }
            BnMode::Eval => (running_mean[c], running_var[c]),
        };
        let is = T::ONE / (var + eps).sqrt();
        inv_std[c] = is;
        let xh = &mut xhat[c * m..(c + 1) * m];
        let ys = &mut y.data[c * m..(c + 1) * m];
        for ((h, o), &v) in xh.iter_mut().zip(ys.iter_mut()).zip(xs) {
            *h = (v - mean) * is;
            *o = gamma[c] * *h + beta[c];
        }
    }
    (y, BnCache { xhat, inv_std, mode, batch_mean, batch_var })
}

pub fn batch_norm_backward<T: Real>(
    dy: &Act<T>,
    cache: &BnCache<T>,
    gamma: &[T],
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Act<T> {
    let m = dy.plane();
    let mf = T::from_f64(m as f64);
    let mut dx = Act::zeros(dy.c, dy.n, dy.h, dy.w);
    for c in 0..dy.c {
        let g = dy.channel(c);
        let xh = &cache.xhat[c * m..(c + 1) * m];
        let sum_g = g.iter().copied().sum::<T>();
        let sum_gx = g.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>();
        dgamma[c] += sum_gx;
        dbeta[c] += sum_g;
        let out = &mut dx.data[c * m..(c + 1) * m];
        match cache.mode {
            BnMode::Train => {
                let scale = gamma[c] * cache.inv_std[c] / mf;
                for ((o, &gv), &h) in out.iter_mut().zip(g).zip(xh) {
                    *o = scale * (mf * gv - sum_g - h * sum_gx);
                }
            }
            BnMode::Eval => {
                let scale = gamma[c] * cache.inv_std[c];
                for (o, &gv) in out.iter_mut().zip(g) {
                    *o = scale * gv;
                }
            }
        }
    }
    dx
}

pub fn relu<T: Real>(x: &mut Act<T>) {
    for v in &mut x.data {
        if *v < T::ZERO {
            *v = T::ZERO;
        }
    }
}

/// Masks `dy` in place by the positive entries of the ReLU output `y`.
pub fn relu_backward<T: Real>(y: &Act<T>, dy: &mut Act<T>) {
    for (g, &v) in dy.data.iter_mut().zip(&y.data) {
        if v <= T::ZERO {
            *g = T::ZERO;
        }
    }
}

pub fn sigmoid<T: Real>(x: &mut Act<T>) {
    for v in &mut x.data {
        *v = v.sigmoid();
    }
}

pub fn sigmoid_backward<T: Real>(y: &Act<T>, dy: &mut Act<T>) {
    for (g, &v) in dy.data.iter_mut().zip(&y.data) {
        *g *= v * (T::ONE - v);
    }
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2<T: Real>(x: &Act<T>) -> Act<T> {
    let (h2, w2) = (x.h * 2, x.w * 2);
    let mut y = Act::zeros(x.c, x.n, h2, w2);
    for plane in 0..x.c * x.n {
        let src = &x.data[plane * x.h * x.w..(plane + 1) * x.h * x.w];
        let dst = &mut y.data[plane * h2 * w2..(plane + 1) * h2 * w2];
        for yy in 0..h2 {
            for xx in 0..w2 {
                dst[yy * w2 + xx] = src[(yy / 2) * x.w + xx / 2];
            }
        }
    }
    y
}

pub fn upsample2_backward<T: Real>(dy: &Act<T>) -> Act<T> {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = Act::zeros(dy.c, dy.n, h, w);
    for plane in 0..dy.c * dy.n {
        let src = &dy.data[plane * dy.h * dy.w..(plane + 1) * dy.h * dy.w];
        let dst = &mut dx.data[plane * h * w..(plane + 1) * h * w];
        for yy in 0..dy.h {
            for xx in 0..dy.w {
                dst[(yy / 2) * w + xx / 2] += src[yy * dy.w + xx];
            }
        }
    }
    dx
}

/// Channel concatenation `[a; b]`.
pub fn concat<T: Real>(a: &Act<T>, b: &Act<T>) -> Act<T> {
    assert_eq!((a.n, a.h, a.w), (b.n, b.h, b.w), "concat spatial dims");
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Act { c: a.c + b.c, n: a.n, h: a.h, w: a.w, data }
}

/// Splits a concatenated gradient back into its `a.c` and remaining channels.
pub fn split<T: Real>(d: &Act<T>, first_channels: usize) -> (Act<T>, Act<T>) {
    let cut = first_channels * d.plane();
    (
        Act { c: first_channels, n: d.n, h: d.h, w: d.w, data: d.data[..cut].to_vec() },
        Act { c: d.c - first_channels, n: d.n, h: d.h, w: d.w, data: d.data[cut..].to_vec() },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(conv: &Conv2d, w: &[f64], x: &Act<f64>) -> Act<f64> {
        let (oh, ow) = conv.out_hw(x.h, x.w);
        let mut y = Act::zeros(conv.cout, x.n, oh, ow);
        for co in 0..conv.cout {
            for n in 0..x.n {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..conv.cin {
                            for ky in 0..conv.kernel {
                                for kx in 0..conv.kernel {
                                    let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                                    let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                        continue;
                                    }
                                    let wv = w[((co * conv.cin + ci) * conv.kernel + ky) * conv.kernel + kx];
                                    acc += wv * x.data[((ci * x.n + n) * x.h + iy as usize) * x.w + ix as usize];
                                }
                            }
                        }
                        y.data[((co * x.n + n) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        y
    }

    fn ramp(len: usize, scale: f64) -> Vec<f64> {
        (0..len).map(|i| ((i * 37 % 23) as f64 - 11.0) * scale).collect()
    }

    #[test]
    fn strided_conv_matches_direct_loops() {
        let conv = Conv2d { cin: 3, cout: 4, kernel: 3, stride: 2, pad: 1 };
        let x = Act { c: 3, n: 2, h: 8, w: 8, data: ramp(3 * 2 * 64, 0.1) };
        let w = ramp(4 * 3 * 9, 0.05);
        let y = conv.forward(&w, None, &x);
        let expect = naive_conv(&conv, &w, &x);
        assert_eq!((y.h, y.w), (4, 4));
        for (a, b) in y.data.iter().zip(&expect.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        // <conv(x), dy> == <x, conv^T(dy)> for the linear map x -> conv(x).
        let conv = Conv2d { cin: 2, cout: 3, kernel: 3, stride: 2, pad: 1 };
        let x = Act { c: 2, n: 2, h: 6, w: 6, data: ramp(2 * 2 * 36, 0.3) };
        let w = ramp(3 * 2 * 9, 0.7);
        let y = conv.forward(&w, None, &x);
        let dy = Act { c: y.c, n: y.n, h: y.h, w: y.w, data: ramp(y.data.len(), 0.9) };
        let mut dw = vec![0.0; w.len()];
        let dx = conv.backward(&w, &x, &dy, &mut dw, None, true).unwrap();
        let lhs: f64 = y.data.iter().zip(&dy.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&dx.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
        // and the weight gradient is the adjoint in w
        let rhs_w: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs_w).abs() < 1e-9 * lhs.abs().max(1.0));
    }

    #[test]
    fn upsample_backward_sums_blocks() {
        let x = Act { c: 1, n: 1, h: 2, w: 2, data: vec![1.0f64, 2.0, 3.0, 4.0] };
        let y = upsample2(&x);
        assert_eq!(y.data[..4], [1.0, 1.0, 2.0, 2.0]);
        let dx = upsample2_backward(&y);
        assert_eq!(dx.data, vec![4.0, 8.0, 12.0, 16.0]);
    }

    #[test]
    fn batch_norm_train_output_is_standardized() {
        let x = Act { c: 2, n: 3, h: 2, w: 2, data: ramp(24, 1.0) };
        let (y, _) = batch_norm_forward(&x, &[1.0, 1.0], &[0.0, 0.0], &[0.0; 2], &[1.0; 2], BnMode::Train);
        for c in 0..2 {
            let ch = y.channel(c);
            let mean: f64 = ch.iter().sum::<f64>() / 12.0;
            let var: f64 = ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 12.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }
}
