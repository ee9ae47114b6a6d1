//! Distillation objective: output cross-entropy against the teacher, the
//! per-layer Gaussian feature likelihood with learnable channel variances,
//! and their weighted sum.
//!
//! Reductions sum over `(c, h, w)` and average over the batch.

use crate::arch::{Mode, ParameterizedModel};
use crate::error::{Error, Result};
use crate::ops::sigmoid;
use crate::tensor::{Scalar, Tensor};

/// Floor applied to student probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;
/// Allowed deviation of a probability row from unit sum.
pub const NORMALIZATION_TOL: f64 = 1e-4;
pub const DEFAULT_EPSILON: f64 = 1e-4;
pub const DEFAULT_LAMBDA: f64 = 0.001;

fn check_distribution<T: Scalar>(context: &'static str, p: &Tensor<T>) -> Result<()> {
    for n in 0..p.shape().n {
        let row = p.sample(n);
        let sum: f64 = row.iter().map(|v| v.as_f64()).sum();
        // Written so that NaN entries fail the check.
        let valid = (sum - 1.0).abs() <= NORMALIZATION_TOL && row.iter().all(|v| v.as_f64() >= 0.0);
        if !valid {
            return Err(Error::NotNormalized { context, row: n, sum });
        }
    }
    Ok(())
}

fn same_shape<T: Scalar>(context: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            context,
            expected: a.shape().to_string(),
            got: b.shape().to_string(),
        });
    }
    Ok(())
}

/// `q` floored at [`PROB_FLOOR`]; NaN passes through so divergence stays visible.
pub fn clamp_prob(q: f64) -> f64 {
    if q.is_nan() {
        q
    } else {
        q.max(PROB_FLOOR)
    }
}

/// Mean over the batch of `-sum_l p_l ln q_l`.
pub fn output_distill_loss<T: Scalar>(teacher_probs: &Tensor<T>, student_probs: &Tensor<T>) -> Result<f64> {
    same_shape("output distillation loss", teacher_probs, student_probs)?;
    check_distribution("teacher probabilities", teacher_probs)?;
    check_distribution("student probabilities", student_probs)?;
    let n = teacher_probs.shape().n;
    let total: f64 = teacher_probs
        .data()
        .iter()
        .zip(student_probs.data())
        .map(|(p, q)| -p.as_f64() * clamp_prob(q.as_f64()).ln())
        .sum();
    Ok(total / n as f64)
}

/// Gradient of [`output_distill_loss`] with respect to the student logits
/// feeding its softmax: `(q - p) / N`.
pub fn output_distill_grad_logits<T: Scalar>(teacher_probs: &Tensor<T>, student_probs: &Tensor<T>) -> Tensor<T> {
    let inv_n = T::from_f64_lossy(1.0 / teacher_probs.shape().n as f64);
    let mut g = student_probs.clone();
    for (d, &p) in g.data_mut().iter_mut().zip(teacher_probs.data()) {
        *d = (*d - p) * inv_n;
    }
    g
}

/// Mean Shannon entropy (nats) of the rows of `p`.
pub fn entropy<T: Scalar>(p: &Tensor<T>) -> f64 {
    let total: f64 = p
        .data()
        .iter()
        .map(|v| {
            let v = v.as_f64();
            if v > 0.0 {
                -v * v.ln()
            } else {
                0.0
            }
        })
        .sum();
    total / p.shape().n as f64
}

/// `ln(1 + e^a)` without overflow for large `|a|`.
pub fn softplus(a: f64) -> f64 {
    a.max(0.0) + (-a.abs()).exp().ln_1p()
}

/// Per-channel variance `softplus(alpha) + epsilon`.
pub fn softplus_variance<T: Scalar>(alpha: &[T], epsilon: f64) -> Vec<f64> {
    alpha.iter().map(|a| softplus(a.as_f64()) + epsilon).collect()
}

/// Inverse of [`softplus_variance`] for one channel; `variance > epsilon`.
pub fn alpha_for_variance(variance: f64, epsilon: f64) -> f64 {
    let s = variance - epsilon;
    // ln(e^s - 1), written to stay accurate for small and large s.
    s + (-(-s).exp_m1()).ln()
}

/// Learnable variance parameters of the four intermediate layers.
#[derive(Clone, Debug, PartialEq)]
pub struct VarianceParams<T> {
    pub alpha: Vec<Vec<T>>,
    pub epsilon: f64,
}

impl<T: Scalar> VarianceParams<T> {
    /// All `alpha = 0`, i.e. variance `ln 2 + epsilon`.
    pub fn new(channels: &[usize], epsilon: f64) -> Self {
        VarianceParams {
            alpha: channels.iter().map(|&c| vec![T::zero(); c]).collect(),
            epsilon,
        }
    }

    pub fn variances(&self, layer: usize) -> Vec<f64> {
        softplus_variance(&self.alpha[layer], self.epsilon)
    }
}

/// Value and gradients of the Gaussian feature likelihood.
#[derive(Clone, Debug)]
pub struct GaussianNll<T> {
    pub value: f64,
    /// Gradient with respect to the predicted mean.
    pub grad_mean: Tensor<T>,
    pub grad_alpha: Vec<T>,
}

/// `(1/N) sum_{n,c,h,w} [ ln sigma_c + (t - m)^2 / (2 sigma_c^2) ]` with
/// `sigma_c^2 = softplus(alpha_c) + epsilon`; the constant term is omitted.
pub fn gaussian_nll<T: Scalar>(
    teacher: &Tensor<T>,
    mean: &Tensor<T>,
    alpha: &[T],
    epsilon: f64,
) -> Result<GaussianNll<T>> {
    same_shape("intermediate loss", teacher, mean)?;
    let s = teacher.shape();
    if alpha.len() != s.c {
        return Err(Error::ShapeMismatch {
            context: "intermediate loss variances",
            expected: format!("{} channels", s.c),
            got: alpha.len().to_string(),
        });
    }
    let var = softplus_variance(alpha, epsilon);
    let inv_n = 1.0 / s.n as f64;
    let plane = s.plane();
    let mut grad_mean = Tensor::zeros(s);
    let mut sq = vec![0.0f64; s.c];
    for n in 0..s.n {
        let t = teacher.sample(n);
        let m = mean.sample(n);
        let g = grad_mean.sample_mut(n);
        for c in 0..s.c {
            let k = T::from_f64_lossy(inv_n / var[c]);
            let mut acc = 0.0;
            for i in c * plane..(c + 1) * plane {
                let r = t[i] - m[i];
                acc += r.as_f64() * r.as_f64();
                g[i] = -r * k;
            }
            sq[c] += acc;
        }
    }
    let count = (s.n * plane) as f64;
    let mut value = 0.0;
    let mut grad_alpha = Vec::with_capacity(s.c);
    for c in 0..s.c {
        value += inv_n * (0.5 * count * var[c].ln() + sq[c] / (2.0 * var[c]));
        let d_var = inv_n * (0.5 * count / var[c] - sq[c] / (2.0 * var[c] * var[c]));
        grad_alpha.push(T::from_f64_lossy(d_var * sigmoid(alpha[c].as_f64())));
    }
    Ok(GaussianNll {
        value,
        grad_mean,
        grad_alpha,
    })
}

/// Per-channel variance minimizing [`gaussian_nll`] for fixed features:
/// the mean squared residual, floored at `epsilon` (the smallest reachable
/// variance).
pub fn optimal_variance<T: Scalar>(teacher: &Tensor<T>, mean: &Tensor<T>, epsilon: f64) -> Result<Vec<f64>> {
    same_shape("optimal variance", teacher, mean)?;
    let s = teacher.shape();
    let plane = s.plane();
    let mut sq = vec![0.0f64; s.c];
    for n in 0..s.n {
        for (i, (t, m)) in teacher.sample(n).iter().zip(mean.sample(n)).enumerate() {
            let r = t.as_f64() - m.as_f64();
            sq[i / plane] += r * r;
        }
    }
    let count = (s.n * plane) as f64;
    Ok(sq.into_iter().map(|v| (v / count).max(epsilon)).collect())
}

/// Gaussian likelihood of teacher features given the mu-mapped student
/// features of the same layer.
pub fn intermediate_loss<T: Scalar>(
    teacher_tap: &Tensor<T>,
    student_tap: &Tensor<T>,
    mu: &ParameterizedModel<T>,
    alpha: &[T],
    epsilon: f64,
) -> Result<f64> {
    let mapped = mu.forward(student_tap, Mode::Eval)?;
    Ok(gaussian_nll(teacher_tap, mapped.output(), alpha, epsilon)?.value)
}

/// Loss terms of one distillation step.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillLossTerms {
    pub l_output: f64,
    /// Absent when intermediate distillation is disabled.
    pub l_intermediate: Option<[f64; 4]>,
    pub lambda: f64,
    pub total: f64,
}

impl DistillLossTerms {
    pub fn new(l_output: f64, l_intermediate: Option<[f64; 4]>, lambda: f64) -> Self {
        let total = match &l_intermediate {
            Some(li) => total_loss(l_output, li, lambda),
            None => l_output,
        };
        DistillLossTerms {
            l_output,
            l_intermediate,
            lambda,
            total,
        }
    }
}

/// `l_output + lambda * sum(l_intermediate)`.
pub fn total_loss(l_output: f64, l_intermediate: &[f64], lambda: f64) -> f64 {
    l_output + lambda * l_intermediate.iter().sum::<f64>()
}
