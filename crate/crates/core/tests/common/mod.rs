//! Independent reference implementations used by several test targets.
#![allow(dead_code)]

use medtex::arch::{mu_spec, Mode, ParameterizedModel, Seeds};
use medtex::losses::{gaussian_nll, output_distill_grad_logits, output_distill_loss, DistillLossTerms};
use medtex::tensor::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;
pub const FD_REL_TOL: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(r: &mut impl Rng, shape: Shape, lo: f64, hi: f64) -> Tensor<f64> {
    let data = (0..shape.numel()).map(|_| r.random_range(lo..hi)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Row softmax written directly from the definition.
pub fn softmax_rows(logits: &[f64], classes: usize) -> Vec<f64> {
    logits
        .chunks(classes)
        .flat_map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(move |v| v / s)
        })
        .collect()
}

/// Naive `-(1/N) sum p ln q` with no clamping.
pub fn cross_entropy_oracle(p: &[f64], q: &[f64], n: usize) -> f64 {
    -p.iter().zip(q).map(|(a, b)| a * b.ln()).sum::<f64>() / n as f64
}

/// Per-element Gaussian NLL with variance per channel, from the density.
pub fn gaussian_oracle(t: &[f64], m: &[f64], var: &[f64], n: usize, plane: usize) -> f64 {
    let c = var.len();
    let mut total = 0.0;
    for (i, (a, b)) in t.iter().zip(m).enumerate() {
        let ch = (i / plane) % c;
        total += 0.5 * var[ch].ln() + (a - b).powi(2) / (2.0 * var[ch]);
    }
    total / n as f64
}

/// Central difference of `f` along each coordinate of `x`.
pub fn numeric_gradient(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + FD_STEP;
            let up = f(&probe);
            probe[i] = orig - FD_STEP;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Largest relative error, with magnitudes below `1e-6` treated as `1e-6`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

fn with_param(mu: &ParameterizedModel<f64>, flat: &[f64]) -> ParameterizedModel<f64> {
    let mut m = mu.clone();
    let mut off = 0;
    for p in m.params_mut() {
        let len = p.data.len();
        p.data.copy_from_slice(&flat[off..off + len]);
        off += len;
    }
    m
}

fn flat_params(mu: &ParameterizedModel<f64>) -> Vec<f64> {
    mu.params().iter().flat_map(|p| p.data.iter().cloned()).collect()
}

/// Worst relative FD error of the output-loss gradient with respect to logits.
pub fn check_output_loss_gradient(seed: u64, batch: usize) -> f64 {
    let mut r = rng(seed);
    let classes = 2;
    let shape = Shape::new(batch, classes, 1, 1);
    let p = softmax_rows(random_tensor(&mut r, shape, -2.0, 2.0).data(), classes);
    let logits = random_tensor(&mut r, shape, -2.0, 2.0).into_vec();
    let p_t = Tensor::from_vec(shape, p.clone()).unwrap();
    let loss = |z: &[f64]| {
        let q = Tensor::from_vec(shape, softmax_rows(z, classes)).unwrap();
        output_distill_loss(&p_t, &q).unwrap()
    };
    let q = Tensor::from_vec(shape, softmax_rows(&logits, classes)).unwrap();
    let analytic = output_distill_grad_logits(&p_t, &q).into_vec();
    max_relative_error(&analytic, &numeric_gradient(&logits, loss))
}

/// Toy intermediate layer: teacher tap, student tap, adapter, alpha.
pub struct ToyLayer {
    pub teacher: Tensor<f64>,
    pub student: Tensor<f64>,
    pub mu: ParameterizedModel<f64>,
    pub alpha: Vec<f64>,
}

/// Two-channel 4x4 teacher and student taps joined by a 2-3-2 adapter.
pub fn toy_layer(seed: u64, index: usize) -> ToyLayer {
    let mut r = rng(seed ^ ((index as u64) << 8));
    let mut spec = mu_spec(2, 3, 2);
    spec.name = format!("mu{index}");
    let mu = ParameterizedModel::new(spec, seed + index as u64).unwrap();
    let shape = Shape::new(2, 2, 4, 4);
    ToyLayer {
        teacher: random_tensor(&mut r, shape, -1.0, 1.0),
        student: random_tensor(&mut r, shape, 0.0, 1.0),
        mu,
        alpha: (0..2).map(|_| r.random_range(-1.0..1.0)).collect(),
    }
}

fn layer_loss(layer: &ToyLayer, mu_flat: &[f64], student: &[f64], alpha: &[f64]) -> f64 {
    let mu = with_param(&layer.mu, mu_flat);
    let s = Tensor::from_vec(layer.student.shape(), student.to_vec()).unwrap();
    let mapped = mu.forward(&s, Mode::Eval).unwrap();
    gaussian_nll(&layer.teacher, mapped.output(), alpha, 1e-4).unwrap().value
}

/// Analytic gradient of one layer's loss over `[mu params, student tap, alpha]`.
fn layer_gradient(layer: &ToyLayer) -> Vec<f64> {
    let trace = layer.mu.forward(&layer.student, Mode::Eval).unwrap();
    let nll = gaussian_nll(&layer.teacher, trace.output(), &layer.alpha, 1e-4).unwrap();
    let seeds = Seeds {
        output: Some(nll.grad_mean),
        ..Seeds::default()
    };
    let (dx, grads) = layer.mu.backward(&trace, seeds, true).unwrap();
    let mut g: Vec<f64> = grads.into_iter().flatten().collect();
    g.extend(dx.unwrap().into_vec());
    g.extend(nll.grad_alpha);
    g
}

fn split_point(layer: &ToyLayer) -> (usize, usize) {
    let np = flat_params(&layer.mu).len();
    (np, np + layer.student.shape().numel())
}

fn layer_point(layer: &ToyLayer) -> Vec<f64> {
    let mut x = flat_params(&layer.mu);
    x.extend_from_slice(layer.student.data());
    x.extend_from_slice(&layer.alpha);
    x
}

/// Worst relative FD error of one intermediate term over the adapter
/// parameters, the student tap and the variance parameters.
pub fn check_intermediate_gradient(seed: u64, index: usize) -> f64 {
    let layer = toy_layer(seed, index);
    let (a, b) = split_point(&layer);
    let x = layer_point(&layer);
    let numeric = numeric_gradient(&x, |v| layer_loss(&layer, &v[..a], &v[a..b], &v[b..]));
    max_relative_error(&layer_gradient(&layer), &numeric)
}

/// Worst relative FD error of `L^M + lambda * sum L^i` over logits and all
/// four toy layers' inputs.
pub fn check_total_gradient(seed: u64, lambda: f64) -> f64 {
    let mut r = rng(seed.wrapping_add(99));
    let shape = Shape::new(2, 2, 1, 1);
    let p = Tensor::from_vec(shape, softmax_rows(random_tensor(&mut r, shape, -2.0, 2.0).data(), 2)).unwrap();
    let logits = random_tensor(&mut r, shape, -2.0, 2.0).into_vec();
    let layers: Vec<ToyLayer> = (1..=4).map(|i| toy_layer(seed, i)).collect();

    let mut x = logits.clone();
    let mut bounds = Vec::new();
    for l in &layers {
        let start = x.len();
        x.extend(layer_point(l));
        bounds.push(start);
    }
    let total = |v: &[f64]| {
        let q = Tensor::from_vec(shape, softmax_rows(&v[..4], 2)).unwrap();
        let lm = output_distill_loss(&p, &q).unwrap();
        let mut li = [0.0; 4];
        for (k, l) in layers.iter().enumerate() {
            let s = bounds[k];
            let (a, b) = split_point(l);
            let n = layer_point(l).len();
            let seg = &v[s..s + n];
            li[k] = layer_loss(l, &seg[..a], &seg[a..b], &seg[b..]);
        }
        DistillLossTerms::new(lm, Some(li), lambda).total
    };
    let q = Tensor::from_vec(shape, softmax_rows(&logits, 2)).unwrap();
    let mut analytic = output_distill_grad_logits(&p, &q).into_vec();
    for l in &layers {
        analytic.extend(layer_gradient(l).into_iter().map(|g| lambda * g));
    }
    max_relative_error(&analytic, &numeric_gradient(&x, total))
}

/// Minimizer of a unimodal `f` on `[lo, hi]` by repeated grid refinement.
pub fn grid_search_min(f: impl Fn(f64) -> f64, lo: f64, hi: f64) -> f64 {
    let steps = 1000;
    let (mut a, mut b) = (lo, hi);
    let mut best = lo;
    for _ in 0..8 {
        let mut best_val = f64::INFINITY;
        for i in 0..=steps {
            let v = a + (b - a) * i as f64 / steps as f64;
            let o = f(v);
            if o < best_val {
                best_val = o;
                best = v;
            }
        }
        let cell = (b - a) / steps as f64;
        a = (best - cell).max(lo);
        b = (best + cell).min(hi);
    }
    best
}

/// Mean and variance of the IoU between a uniform random `k`-subset of
/// `n` pixels and a fixed mask of `m` pixels, summed over the
/// hypergeometric distribution of the overlap.
pub fn hypergeometric_iou(n: usize, m: usize, k: usize) -> (f64, f64) {
    let ln_choose = |a: usize, b: usize| -> f64 { ln_factorial(a) - ln_factorial(b) - ln_factorial(a - b) };
    let lo = (m + k).saturating_sub(n);
    let hi = m.min(k);
    let denom = ln_choose(n, k);
    let (mut mean, mut second) = (0.0, 0.0);
    for i in lo..=hi {
        let p = (ln_choose(m, i) + ln_choose(n - m, k - i) - denom).exp();
        let iou = i as f64 / (m + k - i) as f64;
        mean += p * iou;
        second += p * iou * iou;
    }
    (mean, second - mean * mean)
}

fn ln_factorial(n: usize) -> f64 {
    (1..=n).map(|i| (i as f64).ln()).sum()
}

/// True when the set pixels of a `size x size` mask form one 4-connected
/// component (or none).
pub fn is_four_connected(mask: &[bool], size: usize) -> bool {
    let Some(start) = mask.iter().position(|&b| b) else {
        return true;
    };
    let mut seen = vec![false; mask.len()];
    let mut stack = vec![start];
    seen[start] = true;
    let mut count = 0;
    while let Some(i) = stack.pop() {
        count += 1;
        let (y, x) = (i / size, i % size);
        let mut push = |j: usize| {
            if mask[j] && !seen[j] {
                seen[j] = true;
                stack.push(j);
            }
        };
        if x > 0 {
            push(i - 1);
        }
        if x + 1 < size {
            push(i + 1);
        }
        if y > 0 {
            push(i - size);
        }
        if y + 1 < size {
            push(i + size);
        }
    }
    count == mask.iter().filter(|&&b| b).count()
}
