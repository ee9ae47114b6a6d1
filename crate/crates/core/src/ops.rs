//! Forward and backward kernels for the layer kinds used by every network.
//!
//! All kernels work on whole NCHW batches. Backward kernels accumulate into
//! parameter gradient buffers and return the gradient with respect to the
//! layer input.

use crate::tensor::{Scalar, Shape, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

pub fn conv_out_dim(input: usize, kernel: usize, pad: usize) -> usize {
    input + 2 * pad + 1 - kernel
}

/// Output columns `ox` whose input column `ox + kx - pad` lies inside `0..w`.
fn valid_cols(w: usize, ow: usize, kx: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx);
    let hi = (w + pad).saturating_sub(kx).min(ow);
    (lo, hi.max(lo))
}

/// Unfold one sample `(c, h, w)` into `(c * k * k, oh * ow)` columns.
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize, pad: usize, cols: &mut [T]) {
    let oh = conv_out_dim(h, k, pad);
    let ow = conv_out_dim(w, k, pad);
    let plane = oh * ow;
    let mut row = 0;
    for ci in 0..c {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_cols(w, ow, kx, pad);
                for oy in 0..oh {
                    let iy = oy as isize + ky as isize - pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize || lo == hi {
                        line.fill(T::zero());
                        continue;
                    }
                    let start = iy as usize * w + lo + kx - pad;
                    line[..lo].fill(T::zero());
                    line[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    line[hi..].fill(T::zero());
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into a sample gradient.
fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize, pad: usize, dx: &mut [T]) {
    let oh = conv_out_dim(h, k, pad);
    let ow = conv_out_dim(w, k, pad);
    let plane = oh * ow;
    let mut row = 0;
    for ci in 0..c {
        let dst = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let src = &cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_cols(w, ow, kx, pad);
                for oy in 0..oh {
                    let iy = oy as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize || lo == hi {
                        continue;
                    }
                    let start = iy as usize * w + lo + kx - pad;
                    let d = &mut dst[start..start + hi - lo];
                    for (a, &v) in d.iter_mut().zip(&src[oy * ow + lo..oy * ow + hi]) {
                        *a += v;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Stride-1 convolution. `weight` is `(out_c, in_c, k, k)`.
pub fn conv_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &[T],
    bias: &[T],
    out_c: usize,
    k: usize,
    pad: usize,
) -> Tensor<T> {
    let s = x.shape();
    let oh = conv_out_dim(s.h, k, pad);
    let ow = conv_out_dim(s.w, k, pad);
    let kk = s.c * k * k;
    let plane = oh * ow;
    let mut out = Tensor::zeros(Shape::new(s.n, out_c, oh, ow));
    let direct = k == 1 && pad == 0;
    let mut cols = if direct { Vec::new() } else { vec![T::zero(); kk * plane] };
    for n in 0..s.n {
        let src = x.sample(n);
        let dst = out.sample_mut(n);
        for (co, chunk) in dst.chunks_mut(plane).enumerate() {
            chunk.iter_mut().for_each(|v| *v = bias[co]);
        }
        let rhs: &[T] = if direct {
            src
        } else {
            im2col(src, s.c, s.h, s.w, k, pad, &mut cols);
            &cols
        };
        T::gemm(out_c, kk, plane, weight, false, rhs, false, dst, true);
    }
    out
}

/// Returns the input gradient; accumulates into `grad_weight` / `grad_bias`.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &[T],
    grad_out: &Tensor<T>,
    k: usize,
    pad: usize,
    grad_weight: &mut [T],
    grad_bias: &mut [T],
    need_input_grad: bool,
) -> Option<Tensor<T>> {
    let s = x.shape();
    let go = grad_out.shape();
    let out_c = go.c;
    let plane = go.plane();
    let kk = s.c * k * k;
    let direct = k == 1 && pad == 0;
    let mut cols = if direct { Vec::new() } else { vec![T::zero(); kk * plane] };
    let mut dcols = vec![T::zero(); kk * plane];
    let mut dx = need_input_grad.then(|| Tensor::zeros(s));
    for n in 0..s.n {
        let g = grad_out.sample(n);
        for (co, chunk) in g.chunks(plane).enumerate() {
            let mut acc = T::zero();
            for &v in chunk {
                acc += v;
            }
            grad_bias[co] += acc;
        }
        let src = x.sample(n);
        let rhs: &[T] = if direct {
            src
        } else {
            im2col(src, s.c, s.h, s.w, k, pad, &mut cols);
            &cols
        };
        T::gemm(out_c, plane, kk, g, false, rhs, true, grad_weight, true);
        if let Some(dx) = dx.as_mut() {
            if direct {
                T::gemm(kk, out_c, plane, weight, true, g, false, dx.sample_mut(n), false);
            } else {
                T::gemm(kk, out_c, plane, weight, true, g, false, &mut dcols, false);
                col2im(&dcols, s.c, s.h, s.w, k, pad, dx.sample_mut(n));
            }
        }
    }
    dx
}

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Uses the forward output: the gradient passes where the output is positive.
pub fn relu_backward<T: Scalar>(out: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let mut g = grad_out.clone();
    for (d, &y) in g.data_mut().iter_mut().zip(out.data()) {
        if y <= T::zero() {
            *d = T::zero();
        }
    }
    g
}

/// 2x2 max pooling with stride 2. Returns the pooled tensor and, per output
/// element, the flat index of the winning input element (first maximum in
/// row-major window order).
pub fn maxpool2_forward<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let s = x.shape();
    let (oh, ow) = (s.h / 2, s.w / 2);
    let os = Shape::new(s.n, s.c, oh, ow);
    let mut out = Tensor::zeros(os);
    let mut arg = vec![0u32; os.numel()];
    let src = x.data();
    let dst = out.data_mut();
    let mut o = 0;
    for nc in 0..s.n * s.c {
        let base = nc * s.h * s.w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * s.w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * s.w + 2 * ox + dx;
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                dst[o] = src[best];
                arg[o] = best as u32;
                o += 1;
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward<T: Scalar>(input: Shape, arg: &[u32], grad_out: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(input);
    let d = dx.data_mut();
    for (&i, &g) in arg.iter().zip(grad_out.data()) {
        d[i as usize] += g;
    }
    dx
}

/// Average pooling to a fixed `size x size` output; input dims must be
/// multiples of `size`.
pub fn adaptive_avg_pool_forward<T: Scalar>(x: &Tensor<T>, size: usize) -> Tensor<T> {
    let s = x.shape();
    let (bh, bw) = (s.h / size, s.w / size);
    let scale = T::from_f64_lossy(1.0 / (bh * bw) as f64);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, size, size));
    let src = x.data();
    let dst = out.data_mut();
    for nc in 0..s.n * s.c {
        let base = nc * s.h * s.w;
        for oy in 0..size {
            for ox in 0..size {
                let mut acc = T::zero();
                for y in oy * bh..(oy + 1) * bh {
                    for &v in &src[base + y * s.w + ox * bw..base + y * s.w + (ox + 1) * bw] {
                        acc += v;
                    }
                }
                dst[(nc * size + oy) * size + ox] = acc * scale;
            }
        }
    }
    out
}

pub fn adaptive_avg_pool_backward<T: Scalar>(input: Shape, size: usize, grad_out: &Tensor<T>) -> Tensor<T> {
    let (bh, bw) = (input.h / size, input.w / size);
    let scale = T::from_f64_lossy(1.0 / (bh * bw) as f64);
    let mut dx = Tensor::zeros(input);
    let g = grad_out.data();
    let d = dx.data_mut();
    for nc in 0..input.n * input.c {
        let base = nc * input.h * input.w;
        for y in 0..input.h {
            for x in 0..input.w {
                d[base + y * input.w + x] = g[(nc * size + y / bh) * size + x / bw] * scale;
            }
        }
    }
    dx
}

pub fn upsample2_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let (oh, ow) = (s.h * 2, s.w * 2);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, oh, ow));
    let src = x.data();
    let dst = out.data_mut();
    for nc in 0..s.n * s.c {
        for y in 0..oh {
            for xx in 0..ow {
                dst[(nc * oh + y) * ow + xx] = src[(nc * s.h + y / 2) * s.w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Scalar>(input: Shape, grad_out: &Tensor<T>) -> Tensor<T> {
    let (oh, ow) = (input.h * 2, input.w * 2);
    let mut dx = Tensor::zeros(input);
    let g = grad_out.data();
    let d = dx.data_mut();
    for nc in 0..input.n * input.c {
        for y in 0..oh {
            for xx in 0..ow {
                d[(nc * input.h + y / 2) * input.w + xx / 2] += g[(nc * oh + y) * ow + xx];
            }
        }
    }
    dx
}

/// Fully connected layer over the flattened sample; `weight` is `(out, in)`.
pub fn linear_forward<T: Scalar>(x: &Tensor<T>, weight: &[T], bias: &[T], out: usize) -> Tensor<T> {
    let s = x.shape();
    let fan_in = s.sample_len();
    let mut y = Tensor::zeros(Shape::new(s.n, out, 1, 1));
    for n in 0..s.n {
        y.sample_mut(n).copy_from_slice(bias);
    }
    T::gemm(s.n, fan_in, out, x.data(), false, weight, true, y.data_mut(), true);
    y
}

pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &[T],
    grad_out: &Tensor<T>,
    grad_weight: &mut [T],
    grad_bias: &mut [T],
    need_input_grad: bool,
) -> Option<Tensor<T>> {
    let s = x.shape();
    let fan_in = s.sample_len();
    let out = grad_out.shape().c;
    for n in 0..s.n {
        for (gb, &g) in grad_bias.iter_mut().zip(grad_out.sample(n)) {
            *gb += g;
        }
    }
    T::gemm(out, s.n, fan_in, grad_out.data(), true, x.data(), false, grad_weight, true);
    need_input_grad.then(|| {
        let mut dx = Tensor::zeros(s);
        T::gemm(s.n, out, fan_in, grad_out.data(), false, weight, false, dx.data_mut(), false);
        dx
    })
}

/// Softmax over the channel axis of `(n, c, 1, 1)` logits.
pub fn softmax_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let mut y = x.clone();
    for n in 0..s.n {
        let row = y.sample_mut(n);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    y
}

pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let s = y.shape();
    let mut dx = Tensor::zeros(s);
    for n in 0..s.n {
        let yr = y.sample(n);
        let gr = grad_out.sample(n);
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for ((d, &yy), &g) in dx.sample_mut(n).iter_mut().zip(yr).zip(gr) {
            *d = yy * (g - dot);
        }
    }
    dx
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid)
}

pub fn sigmoid_backward<T: Scalar>(y: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let mut g = grad_out.clone();
    for (d, &yy) in g.data_mut().iter_mut().zip(y.data()) {
        *d = *d * yy * (T::one() - yy);
    }
    g
}

/// Cached normalization state of a training-mode batch-norm pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    /// Unbiased batch variance, used for the running estimate.
    pub batch_var_unbiased: Vec<T>,
}

pub fn batchnorm_train_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
) -> (Tensor<T>, BatchNormCache<T>) {
    let s = x.shape();
    let plane = s.plane();
    let count = s.n * plane;
    let inv_count = T::from_f64_lossy(1.0 / count as f64);
    let eps = T::from_f64_lossy(BN_EPS);
    let mut mean = vec![T::zero(); s.c];
    let mut var = vec![T::zero(); s.c];
    for n in 0..s.n {
        for (c, chunk) in x.sample(n).chunks(plane).enumerate() {
            for &v in chunk {
                mean[c] += v;
            }
        }
    }
    mean.iter_mut().for_each(|m| *m *= inv_count);
    for n in 0..s.n {
        for (c, chunk) in x.sample(n).chunks(plane).enumerate() {
            for &v in chunk {
                let d = v - mean[c];
                var[c] += d * d;
            }
        }
    }
    let unbias = if count > 1 {
        T::from_f64_lossy(1.0 / (count - 1) as f64)
    } else {
        T::zero()
    };
    let var_unbiased: Vec<T> = var.iter().map(|&v| v * unbias).collect();
    let inv_std: Vec<T> = var
        .iter()
        .map(|&v| T::one() / (v * inv_count + eps).sqrt())
        .collect();
    let mut xhat = Tensor::zeros(s);
    let mut y = Tensor::zeros(s);
    for n in 0..s.n {
        let src = x.sample(n);
        let xs = xhat.sample_mut(n);
        for c in 0..s.c {
            for i in c * plane..(c + 1) * plane {
                xs[i] = (src[i] - mean[c]) * inv_std[c];
            }
        }
        let xs = xhat.sample(n).to_vec();
        let ys = y.sample_mut(n);
        for c in 0..s.c {
            for i in c * plane..(c + 1) * plane {
                ys[i] = gamma[c] * xs[i] + beta[c];
            }
        }
    }
    (
        y,
        BatchNormCache {
            xhat,
            inv_std,
            batch_mean: mean,
            batch_var_unbiased: var_unbiased,
        },
    )
}

pub fn batchnorm_eval_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
) -> Tensor<T> {
    let s = x.shape();
    let plane = s.plane();
    let eps = T::from_f64_lossy(BN_EPS);
    let mut y = x.clone();
    for n in 0..s.n {
        let ys = y.sample_mut(n);
        for c in 0..s.c {
            let scale = gamma[c] / (running_var[c] + eps).sqrt();
            let shift = beta[c] - running_mean[c] * scale;
            for v in &mut ys[c * plane..(c + 1) * plane] {
                *v = *v * scale + shift;
            }
        }
    }
    y
}

pub fn batchnorm_backward<T: Scalar>(
    cache: &BatchNormCache<T>,
    gamma: &[T],
    grad_out: &Tensor<T>,
    grad_gamma: &mut [T],
    grad_beta: &mut [T],
) -> Tensor<T> {
    let s = grad_out.shape();
    let plane = s.plane();
    let count = T::from_f64_lossy((s.n * plane) as f64);
    let mut sum_g = vec![T::zero(); s.c];
    let mut sum_gx = vec![T::zero(); s.c];
    for n in 0..s.n {
        let g = grad_out.sample(n);
        let xh = cache.xhat.sample(n);
        for c in 0..s.c {
            for i in c * plane..(c + 1) * plane {
                sum_g[c] += g[i];
                sum_gx[c] += g[i] * xh[i];
            }
        }
    }
    for c in 0..s.c {
        grad_gamma[c] += sum_gx[c];
        grad_beta[c] += sum_g[c];
    }
    let mut dx = Tensor::zeros(s);
    for n in 0..s.n {
        let g = grad_out.sample(n);
        let xh = cache.xhat.sample(n);
        let d = dx.sample_mut(n);
        for c in 0..s.c {
            let k = gamma[c] * cache.inv_std[c] / count;
            for i in c * plane..(c + 1) * plane {
                d[i] = k * (count * g[i] - sum_g[c] - xh[i] * sum_gx[c]);
            }
        }
    }
    dx
}

/// Channel concatenation `[a, b]`.
pub fn concat_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (sa, sb) = (a.shape(), b.shape());
    let mut out = Tensor::zeros(Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w));
    for n in 0..sa.n {
        let dst = out.sample_mut(n);
        let la = sa.sample_len();
        dst[..la].copy_from_slice(a.sample(n));
        dst[la..].copy_from_slice(b.sample(n));
    }
    out
}

pub fn concat_backward<T: Scalar>(sa: Shape, sb: Shape, grad_out: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let mut ga = Tensor::zeros(sa);
    let mut gb = Tensor::zeros(sb);
    let la = sa.sample_len();
    for n in 0..sa.n {
        let g = grad_out.sample(n);
        ga.sample_mut(n).copy_from_slice(&g[..la]);
        gb.sample_mut(n).copy_from_slice(&g[la..]);
    }
    (ga, gb)
}
