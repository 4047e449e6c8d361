//! Capsule layout, the squash nonlinearity, margin loss and the capFC head.

use encap_autodiff::{cast, Graph, Real, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::params::{Ctx, Init, ParamId, ParamStore};

/// Added under the square root of the capsule norm.
pub const SQUASH_EPS: f64 = 1e-8;

/// A `[B, C·d, H, W]` tensor read as `C` channels of `d`-dimensional capsules.
/// The `d` components of one capsule are contiguous along the channel axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CapsuleGrid {
    pub var: Var,
    pub channels: usize,
    pub dim: usize,
}

impl CapsuleGrid {
    pub fn new<F: Real>(g: &Graph<F>, var: Var, dim: usize) -> Result<Self> {
        let s = g.shape(var);
        if s.len() != 4 || dim == 0 || s[1] % dim != 0 {
            return config(format!("cannot read {s:?} as capsules of dim {dim}"));
        }
        Ok(CapsuleGrid {
            var,
            channels: s[1] / dim,
            dim,
        })
    }

    pub fn batch<F: Real>(&self, g: &Graph<F>) -> usize {
        g.shape(self.var)[0]
    }

    pub fn spatial<F: Real>(&self, g: &Graph<F>) -> (usize, usize) {
        let s = g.shape(self.var);
        (s[2], s[3])
    }

    /// `[B, C, d, H, W]` view.
    pub fn split<F: Real>(&self, g: &mut Graph<F>) -> Result<Var> {
        let s = g.shape(self.var).to_vec();
        Ok(g.reshape(self.var, &[s[0], self.channels, self.dim, s[2], s[3]])?)
    }

    /// `[B, C·H·W, d]`, capsules enumerated channel-major then row-major.
    pub fn flatten<F: Real>(&self, g: &mut Graph<F>) -> Result<Var> {
        let s = g.shape(self.var).to_vec();
        let five = self.split(g)?;
        let p = g.permute(five, &[0, 1, 3, 4, 2])?;
        Ok(g.reshape(p, &[s[0], self.channels * s[2] * s[3], self.dim])?)
    }
}

/// `v = ‖s‖²/(1+‖s‖²) · s/√(‖s‖²+ε)` along `axis`.
pub fn squash<F: Real>(g: &mut Graph<F>, s: Var, axis: usize) -> Result<Var> {
    let sq = g.square(s);
    let n2 = g.sum_axis(sq, axis, true)?;
    let one_plus = g.add_scalar(n2, F::one());
    let gain = g.div(n2, one_plus)?;
    let shifted = g.add_scalar(n2, cast(SQUASH_EPS));
    let norm = g.sqrt(shifted)?;
    let scale = g.div(gain, norm)?;
    Ok(g.mul(s, scale)?)
}

/// Squash every capsule of a grid.
pub fn squash_grid<F: Real>(g: &mut Graph<F>, grid: CapsuleGrid) -> Result<CapsuleGrid> {
    let shape = g.shape(grid.var).to_vec();
    let five = grid.split(g)?;
    let v = squash(g, five, 2)?;
    let var = g.reshape(v, &shape)?;
    Ok(CapsuleGrid { var, ..grid })
}

/// Euclidean norms along `axis` (removed), with the squash epsilon.
pub fn norms<F: Real>(g: &mut Graph<F>, v: Var, axis: usize) -> Result<Var> {
    let sq = g.square(v);
    let n2 = g.sum_axis(sq, axis, false)?;
    let shifted = g.add_scalar(n2, cast(SQUASH_EPS));
    Ok(g.sqrt(shifted)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarginCfg {
    pub m_plus: f64,
    pub m_minus: f64,
    pub lambda_down: f64,
}

impl Default for MarginCfg {
    fn default() -> Self {
        MarginCfg {
            m_plus: 0.9,
            m_minus: 0.1,
            lambda_down: 0.5,
        }
    }
}

fn one_hot<F: Real>(labels: &[usize], classes: usize) -> Result<Tensor<F>> {
    let mut t = vec![F::zero(); labels.len() * classes];
    for (b, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Input(format!("label {l} out of range for {classes} classes")));
        }
        t[b * classes + l] = F::one();
    }
    Ok(Tensor::new(vec![labels.len(), classes], t)?)
}

/// Margin loss on class capsules `[B, K, d]`, summed over classes and
/// averaged over the batch. The norm here is exact (no epsilon), so the
/// loss is zero precisely when the hinges are inactive.
pub fn margin_loss<F: Real>(g: &mut Graph<F>, v: Var, labels: &[usize], cfg: MarginCfg) -> Result<Var> {
    let s = g.shape(v).to_vec();
    if s.len() != 3 || s[0] != labels.len() {
        return config(format!("margin loss needs [B, K, d] with B = {} labels, got {s:?}", labels.len()));
    }
    let t = one_hot::<F>(labels, s[1])?;
    let not_t = t.map(|x| F::one() - x);
    let t = g.constant(t);
    let not_t = g.constant(not_t);
    let sq = g.square(v);
    let n2 = g.sum_axis(sq, 2, false)?;
    // sqrt has an unbounded derivative at 0; keep an epsilon only in the derivative path.
    let len = {
        let shifted = g.add_scalar(n2, cast(1e-30));
        g.sqrt(shifted)?
    };
    let neg = g.neg(len);
    let up = g.add_scalar(neg, cast(cfg.m_plus));
    let up = g.relu(up);
    let up = g.square(up);
    let down = g.add_scalar(len, cast(-cfg.m_minus));
    let down = g.relu(down);
    let down = g.square(down);
    let a = g.mul(t, up)?;
    let b = g.mul(not_t, down)?;
    let b = g.scale(b, cast(cfg.lambda_down));
    let per = g.add(a, b)?;
    let total = g.sum(per);
    Ok(g.scale(total, F::one() / cast(labels.len() as f64)))
}

/// Argmax of class-capsule norms, lowest index on ties.
pub fn predict<F: Real>(v: &Tensor<F>) -> Vec<usize> {
    let s = v.shape();
    let (b, k, d) = (s[0], s[1], s[2]);
    let data = v.data();
    (0..b)
        .map(|bi| {
            let mut best = 0;
            let mut best_n = F::neg_infinity();
            for ki in 0..k {
                let row = &data[(bi * k + ki) * d..(bi * k + ki + 1) * d];
                let n: F = row.iter().map(|&x| x * x).sum();
                if n > best_n {
                    best_n = n;
                    best = ki;
                }
            }
            best
        })
        .collect()
}

/// Per-capsule-dimension fully-connected layer producing squashed class capsules.
///
/// Weight layout `[d, n_in, K]`: slice `k` maps the `k`-th component of all
/// input capsules to the `k`-th component of every class capsule.
#[derive(Debug, Clone)]
pub struct CapFc {
    pub w: ParamId,
    pub n_in: usize,
    pub classes: usize,
    pub dim: usize,
}

impl CapFc {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, n_in: usize, classes: usize, dim: usize) -> Self {
        let w = store.add(
            format!("{name}.weight"),
            vec![dim, n_in, classes],
            Init::Normal {
                std: (1.0 / n_in as f64).sqrt(),
            },
        );
        CapFc { w, n_in, classes, dim }
    }

    pub fn forward<F: Real>(&self, ctx: &mut Ctx<F>, input: CapsuleGrid) -> Result<Var> {
        let flat = input.flatten(ctx.g)?;
        let w = ctx.param(self.w);
        capfc(ctx.g, flat, w)
    }
}

/// `x: [B, n_in, d]`, `w: [d, n_in, K]` → squashed `[B, K, d]`.
pub fn capfc<F: Real>(g: &mut Graph<F>, x: Var, w: Var) -> Result<Var> {
    let (xs, ws) = (g.shape(x).to_vec(), g.shape(w).to_vec());
    if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[1] || xs[2] != ws[0] {
        return config(format!("capFC input {xs:?} does not match weight {ws:?}"));
    }
    let xt = g.permute(x, &[2, 0, 1])?;
    let out = g.batch_matmul(xt, w)?;
    let out = g.permute(out, &[1, 2, 0])?;
    squash(g, out, 2)
}
