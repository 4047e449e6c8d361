//! Numpy-style broadcasting over right-aligned shapes.

use crate::real::Real;
use crate::tensor::{numel, strides, Tensor};

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `input` expressed in the index space of `out`; broadcast axes get 0.
pub fn broadcast_strides(input: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(input);
    let lead = out.len() - input.len();
    (0..out.len())
        .map(|i| if i < lead || input[i - lead] == 1 { 0 } else { own[i - lead] })
        .collect()
}

/// Visits every output offset together with the matching offsets in two
/// strided inputs.
pub fn zip_indices(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let nd = out.len();
    if nd == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[nd - 1];
    let (ia, ib) = (sa[nd - 1], sb[nd - 1]);
    let outer = numel(&out[..nd - 1]);
    let mut idx = vec![0usize; nd - 1];
    let (mut oa, mut ob, mut o) = (0usize, 0usize, 0usize);
    for _ in 0..outer {
        for k in 0..inner {
            f(o + k, oa + k * ia, ob + k * ib);
        }
        o += inner;
        for d in (0..nd - 1).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

pub fn binary<F: Real>(a: &Tensor<F>, b: &Tensor<F>, out_shape: &[usize], f: impl Fn(F, F) -> F) -> Tensor<F> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::from_parts(out_shape.to_vec(), data);
    }
    let sa = broadcast_strides(a.shape(), out_shape);
    let sb = broadcast_strides(b.shape(), out_shape);
    let mut data = vec![F::zero(); numel(out_shape)];
    let (ad, bd) = (a.data(), b.data());
    zip_indices(out_shape, &sa, &sb, |o, i, j| data[o] = f(ad[i], bd[j]));
    Tensor::from_parts(out_shape.to_vec(), data)
}

/// Sums `grad` down to `shape`, undoing a broadcast.
pub fn reduce_to<F: Real>(grad: Tensor<F>, shape: &[usize]) -> Tensor<F> {
    if grad.shape() == shape {
        return grad;
    }
    let s = broadcast_strides(shape, grad.shape());
    let zeros = vec![0; grad.ndim()];
    let mut out = vec![F::zero(); numel(shape)];
    let gd = grad.data();
    zip_indices(grad.shape(), &s, &zeros, |o, i, _| out[i] += gd[o]);
    Tensor::from_parts(shape.to_vec(), out)
}

/// Materializes `t` at `shape` (which must be a broadcast of `t`'s shape).
pub fn expand<F: Real>(t: &Tensor<F>, shape: &[usize]) -> Tensor<F> {
    if t.shape() == shape {
        return t.clone();
    }
    let s = broadcast_strides(t.shape(), shape);
    let zeros = vec![0; shape.len()];
    let mut out = vec![F::zero(); numel(shape)];
    let td = t.data();
    zip_indices(shape, &s, &zeros, |o, i, _| out[o] = td[i]);
    Tensor::from_parts(shape.to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_broadcast_right_aligned() {
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[], &[5]), Some(vec![5]));
        assert_eq!(broadcast_shape(&[2, 3], &[4, 3]), None);
    }

    #[test]
    fn reduce_undoes_expand_sum() {
        let t = Tensor::<f64>::from_fn(vec![3, 1], |i| i as f64 + 1.0);
        let e = expand(&t, &[2, 3, 4]);
        let r = reduce_to(e, &[3, 1]);
        assert_eq!(r.data(), &[8.0, 16.0, 24.0]);
    }
}
