//! Selection maps: composing the explainer heads into per-pixel,
//! per-channel scores, masking the input with them, and top-K selection.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Importance scores `values[c, h, w] = channel[c] * spatial[h, w]`.
///
/// The factors are authoritative; `values` is always recomputed from them.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionMap<T> {
    channels: usize,
    height: usize,
    width: usize,
    spatial: Vec<T>,
    channel: Vec<T>,
    values: Vec<T>,
}

fn check_unit_range<T: Scalar>(what: &str, v: &[T]) -> Result<()> {
    if let Some((i, x)) = v
        .iter()
        .enumerate()
        .find(|(_, x)| !(x.as_f64() >= 0.0 && x.as_f64() <= 1.0))
    {
        return Err(Error::InvalidArgument(format!(
            "{what} factor [{i}] = {x} is outside [0, 1]"
        )));
    }
    Ok(())
}

/// Outer product of a `(1, H, W)` spatial factor and a `(C,)` channel factor.
pub fn compose_selection<T: Scalar>(
    spatial: &[T],
    height: usize,
    width: usize,
    channel: &[T],
) -> Result<SelectionMap<T>> {
    if spatial.len() != height * width || height == 0 || width == 0 || channel.is_empty() {
        return Err(Error::ShapeMismatch {
            context: "compose_selection",
            expected: format!("{} spatial entries and >= 1 channel", height * width),
            got: format!("{} spatial, {} channel", spatial.len(), channel.len()),
        });
    }
    check_unit_range("spatial", spatial)?;
    check_unit_range("channel", channel)?;
    let values = outer(channel, spatial);
    Ok(SelectionMap {
        channels: channel.len(),
        height,
        width,
        spatial: spatial.to_vec(),
        channel: channel.to_vec(),
        values,
    })
}

fn outer<T: Scalar>(channel: &[T], spatial: &[T]) -> Vec<T> {
    channel
        .iter()
        .flat_map(|&c| spatial.iter().map(move |&s| c * s))
        .collect()
}

impl<T: Scalar> SelectionMap<T> {
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn spatial_factor(&self) -> &[T] {
        &self.spatial
    }

    pub fn channel_factor(&self) -> &[T] {
        &self.channel
    }

    /// Recompute the outer product and compare bit-for-bit with `values`.
    pub fn is_exact_rank_one(&self) -> bool {
        outer(&self.channel, &self.spatial) == self.values
    }

    pub fn in_unit_range(&self) -> bool {
        self.values.iter().all(|v| v.as_f64() >= 0.0 && v.as_f64() <= 1.0)
    }

    /// Per-pixel maximum over channels.
    pub fn channel_max(&self) -> Vec<T> {
        let plane = self.height * self.width;
        (0..plane)
            .map(|i| {
                (0..self.channels)
                    .map(|c| self.values[c * plane + i])
                    .fold(T::zero(), T::max)
            })
            .collect()
    }
}

/// `X' = theta * X`, elementwise over one `(C, H, W)` sample.
pub fn simplify_input<T: Scalar>(x: &[T], theta: &SelectionMap<T>) -> Result<Vec<T>> {
    if x.len() != theta.values.len() {
        return Err(Error::ShapeMismatch {
            context: "simplify_input",
            expected: format!("{:?}", theta.shape()),
            got: format!("{} elements", x.len()),
        });
    }
    Ok(x.iter().zip(&theta.values).map(|(&a, &t)| a * t).collect())
}

/// Batched form used in training: `spatial` is `(N, 1, H, W)`, `channel`
/// is `(N, C, 1, 1)`. Returns the masked batch and the composed scores.
pub fn simplify_batch<T: Scalar>(
    x: &Tensor<T>,
    spatial: &Tensor<T>,
    channel: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let s = x.shape();
    if spatial.shape() != Shape::new(s.n, 1, s.h, s.w) || channel.shape() != Shape::new(s.n, s.c, 1, 1) {
        return Err(Error::ShapeMismatch {
            context: "simplify_batch",
            expected: format!("spatial (N,1,{},{}) and channel (N,{},1,1)", s.h, s.w, s.c),
            got: format!("{} and {}", spatial.shape(), channel.shape()),
        });
    }
    let mut theta = Tensor::zeros(s);
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        let vals = outer(channel.sample(n), spatial.sample(n));
        for ((o, &xv), &t) in out.sample_mut(n).iter_mut().zip(x.sample(n)).zip(&vals) {
            *o = xv * t;
        }
        theta.sample_mut(n).copy_from_slice(&vals);
    }
    Ok((out, theta))
}

/// Gradients of [`simplify_batch`] with respect to its two factors, given
/// the gradient of the masked batch.
pub fn simplify_batch_backward<T: Scalar>(
    x: &Tensor<T>,
    spatial: &Tensor<T>,
    channel: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let s = x.shape();
    let plane = s.plane();
    let mut g_spatial = Tensor::zeros(spatial.shape());
    let mut g_channel = Tensor::zeros(channel.shape());
    for n in 0..s.n {
        let xs = x.sample(n);
        let g = grad_out.sample(n);
        let sp = spatial.sample(n);
        let ch = channel.sample(n);
        let gs = g_spatial.sample_mut(n);
        let mut gc = vec![T::zero(); s.c];
        for c in 0..s.c {
            let mut acc = T::zero();
            for i in 0..plane {
                let gx = g[c * plane + i] * xs[c * plane + i];
                gs[i] += gx * ch[c];
                acc += gx * sp[i];
            }
            gc[c] = acc;
        }
        g_channel.sample_mut(n).copy_from_slice(&gc);
    }
    (g_spatial, g_channel)
}

/// Binary selection of exactly `k` entries.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TopKMask {
    pub mask: Vec<bool>,
    pub k: usize,
}

/// Flat indices of the `k` largest scores; ties go to the lower flat index
/// (channel-major, then row, then column).
pub fn topk_indices<T: Scalar>(scores: &[T], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::InvalidArgument(format!(
            "top-K requires 1 <= K <= {}, got {k}",
            scores.len()
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let order = |&a: &usize, &b: &usize| -> Ordering {
        scores[b]
            .as_f64()
            .total_cmp(&scores[a].as_f64())
            .then(a.cmp(&b))
    };
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, order);
        idx.truncate(k);
    }
    idx.sort_unstable();
    Ok(idx)
}

pub fn topk_mask<T: Scalar>(scores: &[T], k: usize) -> Result<TopKMask> {
    let mut mask = vec![false; scores.len()];
    for i in topk_indices(scores, k)? {
        mask[i] = true;
    }
    Ok(TopKMask { mask, k })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_channel_copies_spatial() {
        let s = [0.1f64, 0.9, 0.4, 0.0];
        let m = compose_selection(&s, 2, 2, &[1.0, 1.0, 1.0]).unwrap();
        for c in 0..3 {
            assert_eq!(&m.values()[c * 4..(c + 1) * 4], &s);
        }
        assert!(m.is_exact_rank_one());
    }

    #[test]
    fn constant_spatial_gives_constant_planes() {
        let m = compose_selection(&[1.0f64; 4], 2, 2, &[0.5, 1.0, 0.0]).unwrap();
        assert_eq!(m.values(), &[0.5, 0.5, 0.5, 0.5, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn rejects_out_of_range_factors() {
        assert!(compose_selection(&[1.2f64], 1, 1, &[1.0]).is_err());
        assert!(compose_selection(&[0.5f64], 1, 1, &[-0.1]).is_err());
        assert!(compose_selection(&[f64::NAN], 1, 1, &[1.0]).is_err());
        assert!(compose_selection(&[0.5f64, 0.5], 1, 1, &[1.0]).is_err());
    }

    #[test]
    fn simplify_anchors() {
        let x = vec![0.5f64; 8];
        let ones = compose_selection(&[1.0; 4], 2, 2, &[1.0, 1.0]).unwrap();
        assert_eq!(simplify_input(&x, &ones).unwrap(), x);
        let zeros = compose_selection(&[0.0; 4], 2, 2, &[1.0, 1.0]).unwrap();
        assert_eq!(simplify_input(&x, &zeros).unwrap(), vec![0.0; 8]);
        let point4 = compose_selection(&[0.4; 4], 2, 2, &[1.0, 1.0]).unwrap();
        for v in simplify_input(&x, &point4).unwrap() {
            assert!((v - 0.2).abs() < 1e-15);
        }
        assert!(simplify_input(&x[..4], &ones).is_err());
    }

    #[test]
    fn topk_tie_break_and_full_selection() {
        let flat = vec![0.3f64; 12];
        let m = topk_mask(&flat, 5).unwrap();
        assert_eq!(m.mask.iter().filter(|&&b| b).count(), 5);
        assert!(m.mask[..5].iter().all(|&b| b));
        let all = topk_mask(&flat, 12).unwrap();
        assert!(all.mask.iter().all(|&b| b));
        assert!(topk_mask(&flat, 0).is_err());
        assert!(topk_mask(&flat, 13).is_err());
    }

    #[test]
    fn topk_matches_full_sort_on_2x2x2() {
        let vals = [0.12f64, 0.97, 0.33, 0.58, 0.05, 0.71, 0.44, 0.89];
        let mut order: Vec<usize> = (0..8).collect();
        order.sort_by(|&a, &b| vals[b].partial_cmp(&vals[a]).unwrap());
        let mut expected: Vec<usize> = order[..3].to_vec();
        expected.sort();
        assert_eq!(topk_indices(&vals, 3).unwrap(), expected);
        assert_eq!(expected, vec![1, 5, 7]);
    }

    #[test]
    fn batch_backward_is_adjoint() {
        let x = Tensor::from_vec(Shape::new(1, 2, 2, 2), vec![0.1, 0.5, 0.9, 0.3, 0.2, 0.8, 0.6, 0.4]).unwrap();
        let sp = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![0.2, 0.7, 0.5, 0.9]).unwrap();
        let ch = Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![0.3, 0.6]).unwrap();
        let g = Tensor::from_vec(x.shape(), vec![1.0, -2.0, 0.5, 0.25, 3.0, -1.0, 2.0, 0.5]).unwrap();
        let (gs, gc) = simplify_batch_backward(&x, &sp, &ch, &g);
        let f = |sp: &Tensor<f64>, ch: &Tensor<f64>| -> f64 {
            let (out, _) = simplify_batch(&x, sp, ch).unwrap();
            out.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        for i in 0..4 {
            let mut p = sp.clone();
            p.data_mut()[i] += h;
            let mut m = sp.clone();
            m.data_mut()[i] -= h;
            let fd = (f(&p, &ch) - f(&m, &ch)) / (2.0 * h);
            assert!((fd - gs.data()[i]).abs() < 1e-8);
        }
        for c in 0..2 {
            let mut p = ch.clone();
            p.data_mut()[c] += h;
            let mut m = ch.clone();
            m.data_mut()[c] -= h;
            let fd = (f(&sp, &p) - f(&sp, &m)) / (2.0 * h);
            assert!((fd - gc.data()[c]).abs() < 1e-8);
        }
    }
}
