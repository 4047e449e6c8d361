//! capConv: one-pass approximate routing from a master branch (same capsule
//! channel, spatial window) and an aide branch (other capsule channels),
//! mixed by learned per-capsule coefficients.

use encap_autodiff::{Conv2dCfg, Graph, Real, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::capsule::{squash_grid, CapsuleGrid};
use crate::error::{config, Result};
use crate::layers::{BatchNorm, Conv};
use crate::params::{Ctx, Init, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interaction {
    /// `m1 ≡ 1`, `m2 ≡ 0`, no aide branch.
    MasterOnly,
    /// Each coefficient from its own branch.
    V1,
    /// Each coefficient from the other branch.
    V2,
    /// Both coefficients from the two branches concatenated.
    #[default]
    V3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerType {
    /// 3×3 master kernel; may change capsule dimension and spatial size.
    I,
    /// 1×1 master kernel; shape preserving.
    II,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipMode {
    #[default]
    None,
    #[serde(rename = "type_I")]
    TypeI,
    #[serde(rename = "type_II")]
    TypeII,
    Both,
}

impl SkipMode {
    fn type_i(self) -> bool {
        matches!(self, SkipMode::TypeI | SkipMode::Both)
    }

    fn type_ii(self) -> bool {
        matches!(self, SkipMode::TypeII | SkipMode::Both)
    }
}

/// Which input capsule channels the aide branch reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AideInputs {
    /// Every channel except the output's own index.
    #[default]
    Others,
    /// Every channel.
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapConvSpec {
    pub channels: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    #[serde(default = "one")]
    pub aide_kernel: usize,
    #[serde(default)]
    pub interaction: Interaction,
    #[serde(default)]
    pub aide_inputs: AideInputs,
}

fn one() -> usize {
    1
}

impl CapConvSpec {
    /// Type I block, `capConv(3, stride, 1)`.
    pub fn type_i(channels: usize, in_dim: usize, out_dim: usize, stride: usize) -> Self {
        CapConvSpec {
            channels,
            in_dim,
            out_dim,
            kernel: 3,
            stride,
            pad: 1,
            aide_kernel: 1,
            interaction: Interaction::V3,
            aide_inputs: AideInputs::Others,
        }
    }

    /// Type II block, `capConv(1, 1, 0)`.
    pub fn type_ii(channels: usize, dim: usize) -> Self {
        CapConvSpec {
            channels,
            in_dim: dim,
            out_dim: dim,
            kernel: 1,
            stride: 1,
            pad: 0,
            aide_kernel: 1,
            interaction: Interaction::V3,
            aide_inputs: AideInputs::Others,
        }
    }

    pub fn with_interaction(mut self, i: Interaction) -> Self {
        self.interaction = i;
        self
    }

    pub fn layer_type(&self) -> Option<LayerType> {
        match (self.kernel, self.stride, self.pad) {
            (1, 1, 0) if self.in_dim == self.out_dim => Some(LayerType::II),
            (3, _, _) => Some(LayerType::I),
            _ => None,
        }
    }

    /// Aide padding that keeps its output the size of the master's.
    fn aide_pad(&self) -> Option<usize> {
        let shrink = self.kernel.checked_sub(self.aide_kernel)?;
        if shrink % 2 != 0 {
            return None;
        }
        self.pad.checked_sub(shrink / 2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.in_dim == 0 || self.out_dim == 0 || self.stride == 0 {
            return config(format!("degenerate capConv spec {self:?}"));
        }
        if self.layer_type().is_none() {
            return config(format!("capConv({}, {}, {}) is neither Type I nor Type II", self.kernel, self.stride, self.pad));
        }
        if self.interaction != Interaction::MasterOnly && self.aide_pad().is_none() {
            return config(format!(
                "aide kernel {} cannot match master kernel {} with pad {}",
                self.aide_kernel, self.kernel, self.pad
            ));
        }
        Ok(())
    }

    pub fn master_params(&self) -> usize {
        self.channels * self.out_dim * self.in_dim * self.kernel * self.kernel
    }

    /// Aide weights that can be nonzero.
    pub fn aide_params(&self) -> usize {
        if self.interaction == Interaction::MasterOnly {
            return 0;
        }
        let sources = match self.aide_inputs {
            AideInputs::Others => self.channels - 1,
            AideInputs::All => self.channels,
        };
        self.channels * self.out_dim * sources * self.in_dim * self.aide_kernel * self.aide_kernel
    }
}

/// Input capsule channels feeding output channel `j` through each branch.
pub fn channel_partition(spec: &CapConvSpec, j: usize) -> (Vec<usize>, Vec<usize>) {
    let master = vec![j];
    let aide = match (spec.interaction, spec.aide_inputs) {
        (Interaction::MasterOnly, _) => vec![],
        (_, AideInputs::Others) => (0..spec.channels).filter(|&i| i != j).collect(),
        (_, AideInputs::All) => (0..spec.channels).collect(),
    };
    (master, aide)
}

/// Reads the partition off the actual aide weight mask.
pub fn aide_sources<F: Real>(mask: &Tensor<F>, spec: &CapConvSpec, j: usize) -> Vec<usize> {
    let s = mask.shape();
    let (d2, d1) = (spec.out_dim, spec.in_dim);
    let k = s[2] * s[3];
    (0..spec.channels)
        .filter(|&i| (j * d2..(j + 1) * d2).any(|o| (i * d1..(i + 1) * d1).any(|c| (0..k).any(|t| mask.data()[(o * s[1] + c) * k + t] != F::zero()))))
        .collect()
}

/// 0/1 mask over a full `[C·d2, C·d1, k, k]` kernel removing same-index channel blocks.
pub fn aide_mask<F: Real>(spec: &CapConvSpec) -> Tensor<F> {
    let (c, d1, d2, k) = (spec.channels, spec.in_dim, spec.out_dim, spec.aide_kernel);
    let exclude = spec.aide_inputs == AideInputs::Others;
    Tensor::from_fn(vec![c * d2, c * d1, k, k], |idx| {
        let o = idx / (c * d1 * k * k);
        let i = idx / (k * k) % (c * d1);
        if exclude && o / d2 == i / d1 {
            F::zero()
        } else {
            F::one()
        }
    })
}

/// Grouped convolution, groups = C.
pub fn master_branch<F: Real>(g: &mut Graph<F>, u: CapsuleGrid, w: Var, spec: &CapConvSpec) -> Result<Var> {
    if u.channels != spec.channels || u.dim != spec.in_dim {
        return config(format!(
            "capConv expects {}×{} capsules, got {}×{}",
            spec.channels, spec.in_dim, u.channels, u.dim
        ));
    }
    Ok(g.conv2d(u.var, w, Conv2dCfg::new(spec.stride, spec.pad, spec.channels))?)
}

/// Full convolution with the kernel multiplied by `mask`.
pub fn aide_branch<F: Real>(g: &mut Graph<F>, u: CapsuleGrid, w: Var, mask: Var, spec: &CapConvSpec) -> Result<Var> {
    if u.channels != spec.channels || u.dim != spec.in_dim {
        return config(format!(
            "capConv expects {}×{} capsules, got {}×{}",
            spec.channels, spec.in_dim, u.channels, u.dim
        ));
    }
    let pad = spec.aide_pad().ok_or_else(|| crate::Error::Config("aide kernel does not fit".into()))?;
    let wm = g.mul(w, mask)?;
    Ok(g.conv2d(u.var, wm, Conv2dCfg::new(spec.stride, pad, 1))?)
}

/// Per-capsule coefficients `(m1, m2)`, each `[B, C, 1, H, W]`.
///
/// `wc` is `[C, d2, 1, 1]` per coefficient for v1/v2 and `[2C, 2·d2, 1, 1]`
/// for v3.
pub fn coefficients<F: Real>(g: &mut Graph<F>, v1: Var, v2: Var, wc: &[Var], spec: &CapConvSpec) -> Result<(Var, Var)> {
    let s = g.shape(v1).to_vec();
    let (b, c, d, h, w) = (s[0], spec.channels, spec.out_dim, s[2], s[3]);
    let gcfg = Conv2dCfg::new(1, 0, c);
    let gate = |g: &mut Graph<F>, x: Var, wv: Var| -> Result<Var> {
        let y = g.conv2d(x, wv, gcfg)?;
        let y = g.sigmoid(y);
        Ok(g.reshape(y, &[b, c, 1, h, w])?)
    };
    match spec.interaction {
        Interaction::MasterOnly => {
            let m1 = g.constant(Tensor::ones(vec![b, c, 1, h, w]));
            let m2 = g.constant(Tensor::zeros(vec![b, c, 1, h, w]));
            Ok((m1, m2))
        }
        Interaction::V1 => Ok((gate(g, v1, wc[0])?, gate(g, v2, wc[1])?)),
        Interaction::V2 => Ok((gate(g, v2, wc[0])?, gate(g, v1, wc[1])?)),
        Interaction::V3 => {
            let a = g.reshape(v1, &[b, c, d, h, w])?;
            let bb = g.reshape(v2, &[b, c, d, h, w])?;
            let cat = g.concat(&[a, bb], 2)?;
            let cat = g.reshape(cat, &[b, c * 2 * d, h, w])?;
            let y = g.conv2d(cat, wc[0], gcfg)?;
            let y = g.sigmoid(y);
            let y = g.reshape(y, &[b, c, 2, h, w])?;
            let m1 = g.narrow(y, 2, 0, 1)?;
            let m2 = g.narrow(y, 2, 1, 1)?;
            Ok((m1, m2))
        }
    }
}

/// `s = m1·v̂⁽¹⁾ + m2·v̂⁽²⁾`, in blob layout.
pub fn combine<F: Real>(g: &mut Graph<F>, v1: Var, v2: Var, m1: Var, m2: Var, spec: &CapConvSpec) -> Result<Var> {
    let s = g.shape(v1).to_vec();
    let five = [s[0], spec.channels, spec.out_dim, s[2], s[3]];
    let a = g.reshape(v1, &five)?;
    let a = g.mul(a, m1)?;
    let b = g.reshape(v2, &five)?;
    let b = g.mul(b, m2)?;
    let sum = g.add(a, b)?;
    Ok(g.reshape(sum, &s)?)
}

#[derive(Debug, Clone)]
pub struct CapConvLayer {
    pub spec: CapConvSpec,
    pub master: ParamId,
    pub aide: Option<ParamId>,
    pub coef: Vec<ParamId>,
    pub bn: BatchNorm,
}

/// Intermediate values of one capConv pass.
#[derive(Debug, Clone, Copy)]
pub struct CapConvOutput {
    pub master: Var,
    pub aide: Option<Var>,
    pub m1: Var,
    pub m2: Var,
    pub out: CapsuleGrid,
}

impl CapConvLayer {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, spec: CapConvSpec) -> Result<Self> {
        spec.validate()?;
        let (c, d1, d2) = (spec.channels, spec.in_dim, spec.out_dim);
        let k = spec.kernel;
        let master = store.add(format!("{name}.master"), vec![c * d2, d1, k, k], Init::He { fan_in: d1 * k * k });
        let (aide, coef) = if spec.interaction == Interaction::MasterOnly {
            (None, vec![])
        } else {
            let k2 = spec.aide_kernel;
            let fan = (c * d1 * k2 * k2).max(1);
            let id = store.add(format!("{name}.aide"), vec![c * d2, c * d1, k2, k2], Init::He { fan_in: fan });
            let mask = aide_mask::<F>(&spec);
            let w = store.value_mut(id);
            for (x, m) in w.data_mut().iter_mut().zip(mask.data()) {
                *x *= *m;
            }
            let coef = match spec.interaction {
                Interaction::V3 => vec![store.add(
                    format!("{name}.coef"),
                    vec![2 * c, 2 * d2, 1, 1],
                    Init::Normal {
                        std: (1.0 / (2 * d2) as f64).sqrt(),
                    },
                )],
                _ => (0..2)
                    .map(|i| {
                        store.add(
                            format!("{name}.coef{}", i + 1),
                            vec![c, d2, 1, 1],
                            Init::Normal { std: (1.0 / d2 as f64).sqrt() },
                        )
                    })
                    .collect(),
            };
            (Some(id), coef)
        };
        let bn = BatchNorm::new(store, &format!("{name}.bn"), c * d2);
        Ok(CapConvLayer { spec, master, aide, coef, bn })
    }

    pub fn forward<F: Real>(&self, ctx: &mut Ctx<F>, u: CapsuleGrid) -> Result<CapConvOutput> {
        let spec = &self.spec;
        let wm = ctx.param(self.master);
        let v1 = master_branch(ctx.g, u, wm, spec)?;
        let (s, aide, m1, m2) = match self.aide {
            None => {
                let (m1, m2) = coefficients(ctx.g, v1, v1, &[], spec)?;
                (v1, None, m1, m2)
            }
            Some(id) => {
                let wa = ctx.param(id);
                let mask = ctx.g.constant(aide_mask(spec));
                let v2 = aide_branch(ctx.g, u, wa, mask, spec)?;
                let wc: Vec<Var> = self.coef.iter().map(|&p| ctx.param(p)).collect();
                let (m1, m2) = coefficients(ctx.g, v1, v2, &wc, spec)?;
                (combine(ctx.g, v1, v2, m1, m2, spec)?, Some(v2), m1, m2)
            }
        };
        let y = self.bn.forward(ctx, s)?;
        let y = ctx.g.relu(y);
        let grid = CapsuleGrid {
            var: y,
            channels: spec.channels,
            dim: spec.out_dim,
        };
        let out = squash_grid(ctx.g, grid)?;
        Ok(CapConvOutput { master: v1, aide, m1, m2, out })
    }
}

/// Feedback-agreement connections of a module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OtLink {
    /// Module output against the module input (the previous module's output).
    Previous,
    /// Module output against the Type I layer output that feeds the skips.
    Skip,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModuleSpec {
    pub channels: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    /// Stride of the Type I layer.
    pub stride: usize,
    /// Number of Type II layers.
    pub n: usize,
    #[serde(default)]
    pub skip: SkipMode,
    #[serde(default)]
    pub interaction: Interaction,
    #[serde(default)]
    pub aide_inputs: AideInputs,
    #[serde(default)]
    pub ot: Vec<OtLink>,
}

impl ModuleSpec {
    pub fn depth(&self) -> usize {
        self.n + 1
    }

    pub fn layer_specs(&self) -> Vec<CapConvSpec> {
        let mut first = CapConvSpec::type_i(self.channels, self.in_dim, self.out_dim, self.stride).with_interaction(self.interaction);
        first.aide_inputs = self.aide_inputs;
        let mut v = vec![first];
        for _ in 0..self.n {
            let mut l = CapConvSpec::type_ii(self.channels, self.out_dim).with_interaction(self.interaction);
            l.aide_inputs = self.aide_inputs;
            v.push(l);
        }
        v
    }
}

/// One Type I capConv followed by `n` Type II layers.
#[derive(Debug, Clone)]
pub struct EncapModule {
    pub spec: ModuleSpec,
    pub layers: Vec<CapConvLayer>,
    /// Strided 1×1 grouped projection for the Type I skip.
    pub projection: Option<Conv>,
}

#[derive(Debug, Clone)]
pub struct ModuleOutput {
    pub out: CapsuleGrid,
    /// Output of the Type I layer (with its skip), the source of every Type II skip.
    pub first: CapsuleGrid,
    pub layers: Vec<CapConvOutput>,
}

impl EncapModule {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, spec: ModuleSpec) -> Result<Self> {
        let layers = spec
            .layer_specs()
            .into_iter()
            .enumerate()
            .map(|(i, s)| CapConvLayer::new(store, &format!("{name}.l{i}"), s))
            .collect::<Result<Vec<_>>>()?;
        let projection = spec.skip.type_i().then(|| {
            let c = spec.channels;
            Conv::new(
                store,
                &format!("{name}.proj"),
                c * spec.in_dim,
                c * spec.out_dim,
                1,
                Conv2dCfg::new(spec.stride, 0, c),
            )
        });
        Ok(EncapModule { spec, layers, projection })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn forward<F: Real>(&self, ctx: &mut Ctx<F>, u: CapsuleGrid) -> Result<ModuleOutput> {
        let mut outs = Vec::with_capacity(self.layers.len());
        let o = self.layers[0].forward(ctx, u)?;
        outs.push(o);
        let mut x = o.out;
        if let Some(p) = &self.projection {
            let skip = p.forward(ctx, u.var)?;
            if ctx.g.shape(skip) != ctx.g.shape(x.var) {
                return config(format!("Type I skip {:?} does not match {:?}", ctx.g.shape(skip), ctx.g.shape(x.var)));
            }
            x.var = ctx.g.add(x.var, skip)?;
        }
        let first = x;
        for l in &self.layers[1..] {
            let o = l.forward(ctx, x)?;
            outs.push(o);
            let mut y = o.out;
            if self.spec.skip.type_ii() {
                y.var = ctx.g.add(y.var, x.var)?;
            }
            x = y;
        }
        Ok(ModuleOutput { out: x, first, layers: outs })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_types() {
        assert_eq!(CapConvSpec::type_i(4, 8, 16, 2).layer_type(), Some(LayerType::I));
        assert_eq!(CapConvSpec::type_ii(4, 8).layer_type(), Some(LayerType::II));
        let mut bad = CapConvSpec::type_ii(4, 8);
        bad.kernel = 5;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn mask_partitions_channels() {
        for aide_inputs in [AideInputs::Others, AideInputs::All] {
            let mut spec = CapConvSpec::type_i(3, 2, 4, 1);
            spec.aide_inputs = aide_inputs;
            let mask = aide_mask::<f64>(&spec);
            for j in 0..3 {
                let (m, a) = channel_partition(&spec, j);
                assert_eq!(aide_sources(&mask, &spec, j), a);
                if aide_inputs == AideInputs::Others {
                    assert!(!a.contains(&m[0]));
                    assert_eq!(a.len() + m.len(), 3);
                }
            }
        }
    }

    #[test]
    fn aide_params_count_unmasked() {
        let spec = CapConvSpec::type_i(4, 8, 16, 2);
        let mask = aide_mask::<f64>(&spec);
        assert_eq!(mask.sum() as usize, spec.aide_params());
    }

    #[test]
    fn depth_of_module() {
        let m = ModuleSpec {
            channels: 32,
            in_dim: 1,
            out_dim: 2,
            stride: 1,
            n: 3,
            skip: SkipMode::Both,
            interaction: Interaction::V3,
            aide_inputs: AideInputs::Others,
            ot: vec![],
        };
        assert_eq!(m.depth(), 4);
        assert_eq!(m.layer_specs().len(), 4);
    }
}
