//! Entropic optimal transport between generated and observed lower capsules.

use encap_autodiff::{cast, Conv2dCfg, ConvTranspose2dCfg, Graph, Real, Tensor, Var};
use itertools::Itertools;
use serde::{Deserialize, Serialize};

use crate::capsule::{squash_grid, CapsuleGrid, SQUASH_EPS};
use crate::error::{config, Error, Result};
use crate::layers::{BatchNorm, ConvBnRelu};
use crate::params::{Ctx, Init, ParamId, ParamStore};

pub const KL_FLOOR: f64 = 1e-12;
/// Largest problem [`brute_force_ot`] will enumerate.
pub const BRUTE_FORCE_MAX: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostKind {
    /// `1 − cos(x, y)`.
    #[default]
    Cosine,
    /// `‖x − y‖²`.
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OtConfig {
    pub eps: f64,
    pub iters: usize,
    pub stop_gradient: bool,
    pub cost: CostKind,
    pub debiased: bool,
}

impl Default for OtConfig {
    fn default() -> Self {
        OtConfig {
            eps: 0.1,
            iters: 10,
            stop_gradient: true,
            cost: CostKind::Cosine,
            debiased: true,
        }
    }
}

impl OtConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) || self.iters < 1 {
            return config(format!("OT needs eps > 0 and at least one iteration, got eps={} L={}", self.eps, self.iters));
        }
        Ok(())
    }
}

/// Entropic coupling `P = diag(b)·K·diag(a)` with `K = exp(−Q/ε)`, stored
/// through the log scalings.
#[derive(Debug, Clone)]
pub struct Coupling {
    /// `[n2, n1]`.
    pub p: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
    pub log_a: Vec<f64>,
    pub log_b: Vec<f64>,
}

impl Coupling {
    pub fn row_sums(&self) -> Vec<f64> {
        self.p.chunks(self.cols).map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        (0..self.cols).map(|y| (0..self.rows).map(|x| self.p[x * self.cols + y]).sum()).collect()
    }

    pub fn tensor<F: Real>(&self) -> Tensor<F> {
        Tensor::new(vec![self.rows, self.cols], self.p.iter().map(|&v| cast(v)).collect()).expect("coupling shape")
    }

    /// `⟨Q, P⟩`.
    pub fn cost(&self, q: &[f64]) -> f64 {
        q.iter().zip(&self.p).map(|(a, b)| a * b).sum()
    }
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `L` rounds of `a ← 𝟙_{n1}/(Kᵀb)`, `b ← 𝟙_{n2}/(Ka)` from `b = 1`, in
/// log space. `q` is `[n2, n1]` row-major. The row marginal is exact on
/// return, the column marginal lags by half a step.
pub fn sinkhorn(q: &[f64], rows: usize, cols: usize, eps: f64, iters: usize) -> Result<Coupling> {
    if q.len() != rows * cols || rows == 0 || cols == 0 {
        return config(format!("cost matrix of length {} is not {rows}×{cols}", q.len()));
    }
    if !(eps > 0.0) || iters < 1 {
        return config(format!("Sinkhorn needs eps > 0 and L ≥ 1, got {eps}, {iters}"));
    }
    if let Some(i) = q.iter().position(|v| !v.is_finite()) {
        return Err(Error::Input(format!("non-finite cost at entry {i}")));
    }
    let log_k: Vec<f64> = q.iter().map(|v| -v / eps).collect();
    let (lr, lc) = (-(rows as f64).ln(), -(cols as f64).ln());
    let mut log_a = vec![0.0; cols];
    let mut log_b = vec![0.0; rows];
    for _ in 0..iters {
        for y in 0..cols {
            log_a[y] = lc - log_sum_exp((0..rows).map(|x| log_k[x * cols + y] + log_b[x]));
        }
        for x in 0..rows {
            log_b[x] = lr - log_sum_exp((0..cols).map(|y| log_k[x * cols + y] + log_a[y]));
        }
    }
    let p = (0..rows * cols).map(|i| (log_b[i / cols] + log_k[i] + log_a[i % cols]).exp()).collect();
    Ok(Coupling { p, rows, cols, log_a, log_b })
}

/// Tensor form of [`sinkhorn`] for a `[n2, n1]` cost.
pub fn sinkhorn_tensor<F: Real>(q: &Tensor<F>, eps: f64, iters: usize) -> Result<Coupling> {
    match q.shape() {
        &[r, c] => sinkhorn(&q.to_f64_vec(), r, c, eps, iters),
        s => config(format!("cost matrix must be 2-D, got {s:?}")),
    }
}

/// Pairwise costs between feature rows: `fa: [n2, f]`, `fb: [n1, f]` → `[n2, n1]`.
pub fn cost_matrix<F: Real>(g: &mut Graph<F>, fa: Var, fb: Var, kind: CostKind) -> Result<Var> {
    let (sa, sb) = (g.shape(fa).to_vec(), g.shape(fb).to_vec());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
        return config(format!("cost matrix needs [n, f] features of equal width, got {sa:?} and {sb:?}"));
    }
    match kind {
        CostKind::Cosine => {
            let unit = |g: &mut Graph<F>, x: Var| -> Result<Var> {
                let sq = g.square(x);
                let n2 = g.sum_axis(sq, 1, true)?;
                let n2 = g.add_scalar(n2, cast(SQUASH_EPS));
                let n = g.sqrt(n2)?;
                Ok(g.div(x, n)?)
            };
            let (ua, ub) = (unit(g, fa)?, unit(g, fb)?);
            let ubt = g.permute(ub, &[1, 0])?;
            let cos = g.matmul(ua, ubt)?;
            let neg = g.neg(cos);
            Ok(g.add_scalar(neg, F::one()))
        }
        CostKind::L2 => {
            let a = g.reshape(fa, &[sa[0], 1, sa[1]])?;
            let b = g.reshape(fb, &[1, sb[0], sb[1]])?;
            let d = g.sub(a, b)?;
            let d = g.square(d);
            Ok(g.sum_axis(d, 2, false)?)
        }
    }
}

/// `⟨Q, P⟩` with `P` from [`sinkhorn`]. With `stop_gradient` the coupling is
/// a constant; otherwise the log-domain iterations are recorded on the graph.
pub fn ot_loss<F: Real>(g: &mut Graph<F>, q: Var, cfg: &OtConfig) -> Result<Var> {
    cfg.validate()?;
    let p = if cfg.stop_gradient {
        let c = sinkhorn_tensor(g.value(q), cfg.eps, cfg.iters)?;
        g.constant(c.tensor())
    } else {
        coupling_on_graph(g, q, cfg)?
    };
    let qp = g.mul(q, p)?;
    Ok(g.sum(qp))
}

fn coupling_on_graph<F: Real>(g: &mut Graph<F>, q: Var, cfg: &OtConfig) -> Result<Var> {
    let (rows, cols) = match g.shape(q) {
        &[r, c] => (r, c),
        s => return config(format!("cost matrix must be 2-D, got {s:?}")),
    };
    let log_k = g.scale(q, cast(-1.0 / cfg.eps));
    let (lr, lc): (F, F) = (cast(-(rows as f64).ln()), cast(-(cols as f64).ln()));
    let mut log_b = g.constant(Tensor::zeros(vec![rows, 1]));
    let mut log_a = None;
    for _ in 0..cfg.iters {
        let t = g.add(log_k, log_b)?;
        let lse = g.logsumexp(t, 0)?;
        let neg = g.neg(lse);
        let la = g.add_scalar(neg, lc);
        let la = g.reshape(la, &[1, cols])?;
        let t = g.add(log_k, la)?;
        let lse = g.logsumexp(t, 1)?;
        let neg = g.neg(lse);
        let lb = g.add_scalar(neg, lr);
        log_b = g.reshape(lb, &[rows, 1])?;
        log_a = Some(la);
    }
    let t = g.add(log_k, log_b)?;
    let t = g.add(t, log_a.expect("iters >= 1"))?;
    Ok(g.exp(t))
}

/// `W(fa, fb)` for two feature sets.
pub fn ot_distance<F: Real>(g: &mut Graph<F>, fa: Var, fb: Var, cfg: &OtConfig) -> Result<Var> {
    let q = cost_matrix(g, fa, fb, cfg.cost)?;
    ot_loss(g, q, cfg)
}

/// Debiased `2W(ψ, r) − W(ψ, ψ) − W(r, r)`, or plain `W(ψ, r)` when
/// `cfg.debiased` is off.
pub fn sinkhorn_divergence<F: Real>(g: &mut Graph<F>, generated: Var, real: Var, cfg: &OtConfig) -> Result<Var> {
    let cross = ot_distance(g, generated, real, cfg)?;
    if !cfg.debiased {
        return Ok(cross);
    }
    let gg = ot_distance(g, generated, generated, cfg)?;
    let rr = ot_distance(g, real, real, cfg)?;
    let two = g.scale(cross, cast(2.0));
    let d = g.sub(two, gg)?;
    Ok(g.sub(d, rr)?)
}

/// `Σ p log(p / max(q, 1e-12))` for probability vectors, with `0·log 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(&a, _)| a > 0.0).map(|(&a, &b)| a * (a / b.max(KL_FLOOR)).ln()).sum()
}

/// Batch-mean `KL(softmax(p_feats) ‖ softmax(q_feats))` over rows of `[B, f]` features.
pub fn kl_feature_loss<F: Real>(g: &mut Graph<F>, p_feats: Var, q_feats: Var) -> Result<Var> {
    let sp = g.shape(p_feats).to_vec();
    if sp.len() != 2 || g.shape(q_feats) != sp.as_slice() {
        return config(format!("KL needs matching [B, f] features, got {sp:?} and {:?}", g.shape(q_feats)));
    }
    let floor: F = cast(KL_FLOOR);
    let clamp = |g: &mut Graph<F>, x: Var| -> Result<Var> {
        let s = g.softmax(x, 1)?;
        let e = g.add_scalar(s, -floor);
        let e = g.relu(e);
        Ok(g.add_scalar(e, floor))
    };
    let p = g.softmax(p_feats, 1)?;
    let pc = clamp(g, p_feats)?;
    let qc = clamp(g, q_feats)?;
    let lp = g.log(pc)?;
    let lq = g.log(qc)?;
    let d = g.sub(lp, lq)?;
    let t = g.mul(p, d)?;
    let s = g.sum(t);
    Ok(g.scale(s, F::one() / cast(sp[0] as f64)))
}

/// Exact OT value for uniform marginals on an `n × n` cost, `n ≤ 6`, by
/// enumerating permutation couplings.
pub fn brute_force_ot(q: &[f64], n: usize) -> Result<f64> {
    if n > BRUTE_FORCE_MAX {
        return Err(Error::Refused(format!("{n}! permutations exceeds the brute-force limit of {BRUTE_FORCE_MAX}")));
    }
    if n == 0 || q.len() != n * n {
        return config(format!("brute-force OT needs an n×n cost, got {} entries for n={n}", q.len()));
    }
    Ok((0..n)
        .permutations(n)
        .map(|perm| perm.iter().enumerate().map(|(x, &y)| q[x * n + y]).sum::<f64>() / n as f64)
        .fold(f64::INFINITY, f64::min))
}

/// Deconvolutional capsule generator `g_ψ`: higher capsules back to the shape
/// of the lower ones.
#[derive(Debug, Clone)]
pub struct Generator {
    pub w: ParamId,
    pub cfg: ConvTranspose2dCfg,
    pub bn: BatchNorm,
    pub out_dim: usize,
}

impl Generator {
    /// `stride` 2 doubles the spatial size, 1 keeps it.
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        in_channels: usize,
        in_dim: usize,
        out_channels: usize,
        out_dim: usize,
        stride: usize,
    ) -> Result<Self> {
        let (cin, cout) = (in_channels * in_dim, out_channels * out_dim);
        if !(1..=2).contains(&stride) || cout % in_dim != 0 {
            return config(format!("generator: stride {stride}, {cout} output channels with {in_dim} groups"));
        }
        let w = store.add(format!("{name}.weight"), vec![cin, cout / in_dim, 3, 3], Init::He { fan_in: cin / in_dim * 9 });
        let bn = BatchNorm::new(store, &format!("{name}.bn"), cout);
        Ok(Generator {
            w,
            cfg: ConvTranspose2dCfg::new(stride, 1, stride - 1, in_dim),
            bn,
            out_dim,
        })
    }

    pub fn forward<F: Real>(&self, ctx: &mut Ctx<F>, v: CapsuleGrid, target: &[usize]) -> Result<CapsuleGrid> {
        let w = ctx.param(self.w);
        let y = ctx.g.conv_transpose2d(v.var, w, self.cfg)?;
        if ctx.g.shape(y) != target {
            return config(format!("generated {:?} does not match target {target:?}", ctx.g.shape(y)));
        }
        let y = self.bn.forward(ctx, y)?;
        let y = ctx.g.relu(y);
        let grid = CapsuleGrid::new(ctx.g, y, self.out_dim)?;
        squash_grid(ctx.g, grid)
    }
}

/// Feature extractor `f_φ`: two stride-2 conv-BN-ReLU stages down to one
/// channel, flattened.
#[derive(Debug, Clone)]
pub struct Extractor {
    pub first: ConvBnRelu,
    pub second: ConvBnRelu,
}

impl Extractor {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, channels: usize) -> Result<Self> {
        if channels < 4 {
            return config(format!("extractor needs at least 4 input channels, got {channels}"));
        }
        let cfg = Conv2dCfg::new(2, 1, 1);
        let mid = channels / 4;
        Ok(Extractor {
            first: ConvBnRelu::new(store, &format!("{name}.c1"), channels, mid, 3, cfg),
            second: ConvBnRelu::new(store, &format!("{name}.c2"), mid, 1, 3, cfg),
        })
    }

    pub fn forward<F: Real>(&self, ctx: &mut Ctx<F>, x: Var) -> Result<Var> {
        let y = self.first.forward(ctx, x)?;
        let y = self.second.forward(ctx, y)?;
        let s = ctx.g.shape(y).to_vec();
        Ok(ctx.g.reshape(y, &[s[0], s[2] * s[3]])?)
    }
}

/// Which divergence the feedback unit minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackLoss {
    #[default]
    Sinkhorn,
    Kl,
}

/// Generator plus extractor comparing regenerated lower capsules with the
/// observed ones.
#[derive(Debug, Clone)]
pub struct OtUnit {
    pub generator: Generator,
    pub extractor: Extractor,
    pub cfg: OtConfig,
    pub loss: FeedbackLoss,
}

impl OtUnit {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        higher: (usize, usize),
        lower: (usize, usize),
        stride: usize,
        cfg: OtConfig,
        loss: FeedbackLoss,
    ) -> Result<Self> {
        cfg.validate()?;
        let generator = Generator::new(store, &format!("{name}.gen"), higher.0, higher.1, lower.0, lower.1, stride)?;
        let extractor = Extractor::new(store, &format!("{name}.ext"), lower.0 * lower.1)?;
        Ok(OtUnit {
            generator,
            extractor,
            cfg,
            loss,
        })
    }

    /// Divergence between `g_ψ(v)` and `u`. Both sets go through the extractor
    /// as one batch so they share normalization statistics.
    pub fn forward<F: Real>(&self, ctx: &mut Ctx<F>, v: CapsuleGrid, u: CapsuleGrid) -> Result<Var> {
        let target = ctx.g.shape(u.var).to_vec();
        let b = target[0];
        if b == 1 {
            log::warn!("feedback divergence on a single-sample batch");
        }
        let generated = self.generator.forward(ctx, v, &target)?;
        let both = ctx.g.concat(&[generated.var, u.var], 0)?;
        let f = self.extractor.forward(ctx, both)?;
        let fg = ctx.g.narrow(f, 0, 0, b)?;
        let fr = ctx.g.narrow(f, 0, b, b)?;
        match self.loss {
            FeedbackLoss::Sinkhorn => sinkhorn_divergence(ctx.g, fg, fr, &self.cfg),
            FeedbackLoss::Kl => kl_feature_loss(ctx.g, fr, fg),
        }
    }
}
