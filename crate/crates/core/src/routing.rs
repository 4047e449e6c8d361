//! Reference CapNet layer: every lower capsule is mapped into the space of
//! every higher capsule, then routed iteratively (dynamic or EM).

use std::io::Write;

use encap_autodiff::{cast, Conv2dCfg, Graph, Real, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::capsule::{squash, CapsuleGrid};
use crate::error::{config, Error, Result};
use crate::params::{Ctx, Init, ParamId, ParamStore};

/// Lower bound on EM cluster variances.
pub const EM_VAR_FLOOR: f64 = 1e-6;
/// Smoothing added to EM assignment weights so an all-inactive input still
/// yields a well-defined (uniform) weighted mean.
pub const EM_WEIGHT_SMOOTHING: f64 = 1e-8;
const STANDARDIZE_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingMethod {
    Dynamic,
    Em,
}

/// Axis along which dynamic-routing logits are normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftmaxAxis {
    /// Over lower capsules `i`: each higher capsule distributes unit mass.
    #[default]
    Lower,
    /// Over higher capsules `j`: each lower capsule distributes unit mass.
    Higher,
}

impl SoftmaxAxis {
    fn axis(self) -> usize {
        match self {
            SoftmaxAxis::Lower => 1,
            SoftmaxAxis::Higher => 2,
        }
    }
}

/// Coupling coefficients `c` of shape `[B, n1, n2]`, one entry per iteration.
#[derive(Debug, Clone, Default)]
pub struct RoutingTrace<F> {
    pub coefficients: Vec<Tensor<F>>,
}

/// `v̂_{j|i} = w_ij · u_i` for all pairs, as a grouped 1×1 convolution.
///
/// `w: [C·n2·d2, d1, 1, 1]`; output `[B, n1, n2, d2]` with `n1 = C·H·W`
/// enumerated channel-major. Spatial positions of one channel share a kernel.
pub fn capnet_map<F: Real>(g: &mut Graph<F>, u: CapsuleGrid, w: Var, n2: usize, d2: usize) -> Result<Var> {
    let ws = g.shape(w).to_vec();
    let c = u.channels;
    if ws != [c * n2 * d2, u.dim, 1, 1] {
        return config(format!("mapping kernel {ws:?} does not fit {c} channels of dim {} into {n2}×{d2}", u.dim));
    }
    let b = u.batch(g);
    let (h, wd) = u.spatial(g);
    let y = g.conv2d(u.var, w, Conv2dCfg::new(1, 0, c))?;
    let y = g.reshape(y, &[b, c, n2, d2, h, wd])?;
    let y = g.permute(y, &[0, 1, 4, 5, 2, 3])?;
    Ok(g.reshape(y, &[b, c * h * wd, n2, d2])?)
}

fn vhat_dims<F: Real>(g: &Graph<F>, vhat: Var) -> Result<(usize, usize, usize, usize)> {
    match g.shape(vhat) {
        &[b, n1, n2, d] => Ok((b, n1, n2, d)),
        s => config(format!("mapped activations must be [B, n1, n2, d2], got {s:?}")),
    }
}

/// Routing by agreement. Returns `v: [B, n2, d2]` and the coefficients used
/// in each iteration.
pub fn dynamic_routing<F: Real>(g: &mut Graph<F>, vhat: Var, iters: usize, axis: SoftmaxAxis) -> Result<(Var, RoutingTrace<F>)> {
    if iters < 1 {
        return config("routing needs at least one iteration");
    }
    let (b, n1, n2, d) = vhat_dims(g, vhat)?;
    let mut logits = g.constant(Tensor::zeros(vec![b, n1, n2]));
    let mut trace = RoutingTrace::default();
    let mut v = None;
    for r in 0..iters {
        let c = g.softmax(logits, axis.axis())?;
        trace.coefficients.push(g.value(c).clone());
        let c4 = g.reshape(c, &[b, n1, n2, 1])?;
        let weighted = g.mul(c4, vhat)?;
        let s = g.sum_axis(weighted, 1, false)?;
        let out = squash(g, s, 2)?;
        if r + 1 < iters {
            let v4 = g.reshape(out, &[b, 1, n2, d])?;
            let agree = g.mul(vhat, v4)?;
            let agree = g.sum_axis(agree, 3, false)?;
            logits = g.add(logits, agree)?;
        }
        v = Some(out);
    }
    Ok((v.expect("iters >= 1"), trace))
}

/// Output of [`em_routing`].
#[derive(Debug, Clone, Copy)]
pub struct EmOutput {
    /// Cluster means `μ_j`, `[B, n2, d2]`.
    pub mean: Var,
    /// Activations `a_j ∈ (0,1)`, `[B, n2]`.
    pub activation: Var,
}

/// Gaussian-cluster routing with one diagonal Gaussian per higher capsule.
///
/// `a_in: [B, n1]`, `beta_v`, `beta_a`: `[n2]`. Each iteration runs an M-step
/// and, except the last, an E-step. The cluster cost is standardized across
/// `j` before the sigmoid that produces `a_j`.
pub fn em_routing<F: Real>(g: &mut Graph<F>, vhat: Var, a_in: Var, beta_v: Var, beta_a: Var, iters: usize) -> Result<(EmOutput, RoutingTrace<F>)> {
    if iters < 1 {
        return config("routing needs at least one iteration");
    }
    let (b, n1, n2, d) = vhat_dims(g, vhat)?;
    if g.shape(a_in) != [b, n1] || g.shape(beta_v) != [n2] || g.shape(beta_a) != [n2] {
        return config(format!(
            "EM inputs: a_in {:?}, beta_v {:?}, beta_a {:?} for [B={b}, n1={n1}, n2={n2}]",
            g.shape(a_in),
            g.shape(beta_v),
            g.shape(beta_a)
        ));
    }
    let eta: F = cast(EM_WEIGHT_SMOOTHING);
    let floor: F = cast(EM_VAR_FLOOR);
    let a3 = g.reshape(a_in, &[b, n1, 1])?;
    let bv = g.reshape(beta_v, &[1, 1, n2, 1])?;
    let mut c = g.constant(Tensor::full(vec![b, n1, n2], F::one() / cast(n2 as f64)));
    let mut trace = RoutingTrace {
        coefficients: vec![g.value(c).clone()],
    };
    let mut out = None;
    for r in 0..iters {
        // M-step
        let resp = g.mul(c, a3)?;
        let mass = g.sum_axis(resp, 1, true)?;
        let num = g.add_scalar(resp, eta);
        let den = g.add_scalar(mass, eta * cast(n1 as f64));
        let w = g.div(num, den)?;
        let w4 = g.reshape(w, &[b, n1, n2, 1])?;
        let wx = g.mul(w4, vhat)?;
        let mu = g.sum_axis(wx, 1, true)?;
        let diff = g.sub(vhat, mu)?;
        let sq = g.square(diff);
        let wsq = g.mul(w4, sq)?;
        let var = g.sum_axis(wsq, 1, true)?;
        let excess = g.add_scalar(var, -floor);
        let excess = g.relu(excess);
        let var = g.add_scalar(excess, floor);
        let log_var = g.log(var)?;
        let half_log_var = g.scale(log_var, cast(0.5));
        let per_dim = g.add(bv, half_log_var)?;
        let mass4 = g.reshape(mass, &[b, 1, n2, 1])?;
        let cost = g.mul(per_dim, mass4)?;
        let cost = g.sum_axis(cost, 3, false)?;
        let cost = g.reshape(cost, &[b, n2])?;
        let logit = g.sub(beta_a, cost)?;
        let centered = {
            let m = g.mean_axis(logit, 1, true)?;
            g.sub(logit, m)?
        };
        let spread = {
            let sq = g.square(centered);
            let v = g.mean_axis(sq, 1, true)?;
            let v = g.add_scalar(v, cast(STANDARDIZE_EPS));
            g.sqrt(v)?
        };
        let z = g.div(centered, spread)?;
        let a_out = g.sigmoid(z);
        let mean = g.reshape(mu, &[b, n2, d])?;
        out = Some(EmOutput { mean, activation: a_out });
        if r + 1 < iters {
            // E-step: c_ij ∝ a_j · N(v̂_{j|i}; μ_j, σ_j²)
            let two_var = g.scale(var, cast(2.0));
            let quad = g.div(sq, two_var)?;
            let log_norm = g.add_scalar(log_var, cast((2.0 * std::f64::consts::PI).ln()));
            let log_norm = g.scale(log_norm, cast(0.5));
            let nll = g.add(quad, log_norm)?;
            let nll = g.sum_axis(nll, 3, false)?;
            let log_a = g.log(a_out)?;
            let log_a = g.reshape(log_a, &[b, 1, n2])?;
            let logits = g.sub(log_a, nll)?;
            c = g.softmax(logits, 2)?;
            trace.coefficients.push(g.value(c).clone());
        }
    }
    Ok((out.expect("iters >= 1"), trace))
}

/// `[B, C·H·W, d]` capsules (channel-major) back to a `[B, C·d, H, W]` blob.
pub fn to_blob<F: Real>(g: &mut Graph<F>, v: Var, channels: usize, spatial: (usize, usize)) -> Result<CapsuleGrid> {
    let s = g.shape(v).to_vec();
    let (h, w) = spatial;
    if s.len() != 3 || s[1] != channels * h * w {
        return config(format!("{s:?} cannot be rearranged into {channels} channels at {h}×{w}"));
    }
    let (b, d) = (s[0], s[2]);
    let y = g.reshape(v, &[b, channels, h, w, d])?;
    let y = g.permute(y, &[0, 1, 4, 2, 3])?;
    let var = g.reshape(y, &[b, channels * d, h, w])?;
    Ok(CapsuleGrid { var, channels, dim: d })
}

#[derive(Debug, Clone)]
pub struct CapnetSpec {
    pub in_channels: usize,
    pub in_dim: usize,
    pub out_channels: usize,
    pub out_spatial: (usize, usize),
    pub out_dim: usize,
    pub method: RoutingMethod,
    pub iters: usize,
    pub axis: SoftmaxAxis,
}

impl CapnetSpec {
    pub fn n2(&self) -> usize {
        self.out_channels * self.out_spatial.0 * self.out_spatial.1
    }

    /// Output channels of the mapping kernel, `C·n2·d2`.
    pub fn kernel_channels(&self) -> usize {
        self.in_channels * self.n2() * self.out_dim
    }

    pub fn mapping_params(&self) -> usize {
        self.kernel_channels() * self.in_dim
    }
}

/// Mapped activations plus routed output of one CapNet layer.
#[derive(Debug, Clone)]
pub struct CapnetOutput<F> {
    pub vhat: Var,
    /// Routed capsules `[B, n2, d2]`.
    pub v: Var,
    pub grid: CapsuleGrid,
    /// EM only: `a_j`, `[B, n2]`.
    pub activation: Option<Var>,
    pub trace: RoutingTrace<F>,
}

#[derive(Debug, Clone)]
pub struct CapnetLayer {
    pub spec: CapnetSpec,
    pub w: ParamId,
    pub beta_v: Option<ParamId>,
    pub beta_a: Option<ParamId>,
}

impl CapnetLayer {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, spec: CapnetSpec) -> Result<Self> {
        if spec.iters < 1 {
            return config(format!("{name}: routing needs at least one iteration"));
        }
        let w = store.add(
            format!("{name}.map"),
            vec![spec.kernel_channels(), spec.in_dim, 1, 1],
            Init::Normal {
                std: 1.0 / (spec.in_dim as f64).sqrt(),
            },
        );
        let (beta_v, beta_a) = match spec.method {
            RoutingMethod::Dynamic => (None, None),
            RoutingMethod::Em => {
                let n2 = spec.n2();
                (
                    Some(store.add(format!("{name}.beta_v"), vec![n2], Init::Zeros)),
                    Some(store.add(format!("{name}.beta_a"), vec![n2], Init::Zeros)),
                )
            }
        };
        Ok(CapnetLayer { spec, w, beta_v, beta_a })
    }

    /// `a_in` is required for EM routing and ignored otherwise.
    pub fn forward<F: Real>(&self, ctx: &mut Ctx<F>, u: CapsuleGrid, a_in: Option<Var>) -> Result<CapnetOutput<F>> {
        let s = &self.spec;
        if u.channels != s.in_channels || u.dim != s.in_dim {
            return config(format!(
                "CapNet layer expects {}×{} capsules, got {}×{}",
                s.in_channels, s.in_dim, u.channels, u.dim
            ));
        }
        let w = ctx.param(self.w);
        let vhat = capnet_map(ctx.g, u, w, s.n2(), s.out_dim)?;
        let (v, activation, trace) = match s.method {
            RoutingMethod::Dynamic => {
                let (v, t) = dynamic_routing(ctx.g, vhat, s.iters, s.axis)?;
                (v, None, t)
            }
            RoutingMethod::Em => {
                let a_in = a_in.ok_or_else(|| Error::Config("EM routing needs input activations".into()))?;
                let bv = ctx.param(self.beta_v.expect("EM layer has beta_v"));
                let ba = ctx.param(self.beta_a.expect("EM layer has beta_a"));
                let (o, t) = em_routing(ctx.g, vhat, a_in, bv, ba, s.iters)?;
                (em_capsules(ctx.g, o)?, Some(o.activation), t)
            }
        };
        let grid = to_blob(ctx.g, v, s.out_channels, s.out_spatial)?;
        Ok(CapnetOutput {
            vhat,
            v,
            grid,
            activation,
            trace,
        })
    }
}

/// EM capsules presented as vectors whose length is the activation:
/// `a_j · μ_j / ‖μ_j‖`.
pub fn em_capsules<F: Real>(g: &mut Graph<F>, o: EmOutput) -> Result<Var> {
    let s = g.shape(o.mean).to_vec();
    let sq = g.square(o.mean);
    let n2 = g.sum_axis(sq, 2, true)?;
    let n2 = g.add_scalar(n2, cast(crate::capsule::SQUASH_EPS));
    let norm = g.sqrt(n2)?;
    let dir = g.div(o.mean, norm)?;
    let a = g.reshape(o.activation, &[s[0], s[1], 1])?;
    Ok(g.mul(dir, a)?)
}

/// Capsule norms of a grid, `[B, C·H·W]`, used as EM input activations.
pub fn grid_activations<F: Real>(g: &mut Graph<F>, u: CapsuleGrid) -> Result<Var> {
    let flat = u.flatten(g)?;
    crate::capsule::norms(g, flat, 2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistogramRow {
    pub bin_low: f64,
    pub bin_high: f64,
    pub percent: f64,
    pub mean_length: f64,
}

pub const HISTOGRAM_BINS: usize = 20;

/// Distribution of `cos(v_j, v̂_{j|i})` over all `(b, i, j)`, with the mean
/// length of the mapped activations falling in each bin.
pub fn routing_histogram<F: Real>(vhat: &Tensor<F>, v: &Tensor<F>) -> Result<Vec<HistogramRow>> {
    let (sv, sh) = (v.shape(), vhat.shape());
    if sh.len() != 4 || sv.len() != 3 || sv != [sh[0], sh[2], sh[3]] {
        return config(format!("histogram needs v̂ [B,n1,n2,d] and v [B,n2,d], got {sh:?} and {sv:?}"));
    }
    let (b, n1, n2, d) = (sh[0], sh[1], sh[2], sh[3]);
    let (hd, vd) = (vhat.to_f64_vec(), v.to_f64_vec());
    let mut count = [0usize; HISTOGRAM_BINS];
    let mut length = [0f64; HISTOGRAM_BINS];
    for bi in 0..b {
        for i in 0..n1 {
            for j in 0..n2 {
                let x = &hd[((bi * n1 + i) * n2 + j) * d..][..d];
                let y = &vd[(bi * n2 + j) * d..][..d];
                let nx = x.iter().map(|a| a * a).sum::<f64>().sqrt();
                let ny = y.iter().map(|a| a * a).sum::<f64>().sqrt();
                let dot: f64 = x.iter().zip(y).map(|(a, c)| a * c).sum();
                let cos = (dot / (nx * ny).max(1e-12)).clamp(-1.0, 1.0);
                let bin = (((cos + 1.0) / 2.0 * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
                count[bin] += 1;
                length[bin] += nx;
            }
        }
    }
    let total = (b * n1 * n2) as f64;
    let width = 2.0 / HISTOGRAM_BINS as f64;
    Ok((0..HISTOGRAM_BINS)
        .map(|k| HistogramRow {
            bin_low: -1.0 + k as f64 * width,
            bin_high: -1.0 + (k + 1) as f64 * width,
            percent: 100.0 * count[k] as f64 / total,
            mean_length: if count[k] > 0 { length[k] / count[k] as f64 } else { 0.0 },
        })
        .collect())
}

/// Percentage of mass with `|cos| > threshold`, counted per whole bin.
pub fn polarized_mass(rows: &[HistogramRow], threshold: f64) -> f64 {
    rows.iter()
        .filter(|r| r.bin_low >= threshold || r.bin_high <= -threshold)
        .map(|r| r.percent)
        .sum()
}

pub fn write_histogram_csv(mut out: impl Write, rows: &[HistogramRow]) -> std::io::Result<()> {
    writeln!(out, "bin_low,bin_high,percent,mean_length")?;
    for r in rows {
        writeln!(out, "{},{},{},{}", r.bin_low, r.bin_high, r.percent, r.mean_length)?;
    }
    Ok(())
}
