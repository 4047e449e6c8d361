//! Declarative network configs and their assembly into runnable models.

use std::collections::BTreeMap;
use std::path::Path;

use encap_autodiff::{Conv2dCfg, Real, Var};
use serde::{Deserialize, Serialize};

use crate::capconv::{EncapModule, Interaction, ModuleSpec, OtLink, SkipMode};
use crate::capsule::{squash, squash_grid, CapFc, CapsuleGrid};
use crate::error::{config, Error, Result};
use crate::layers::{BatchNorm, Conv, ConvBnRelu, Linear};
use crate::params::{Ctx, ParamStore};
use crate::routing::{grid_activations, CapnetLayer, CapnetOutput, CapnetSpec, RoutingMethod, SoftmaxAxis};
use crate::sinkhorn::{FeedbackLoss, OtConfig, OtUnit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Encapnet,
    CapnetDynamic,
    CapnetEm,
    VanillaCnn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StemLayer {
    pub out: usize,
    #[serde(default = "three")]
    pub kernel: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default = "one")]
    pub pad: usize,
}

fn one() -> usize {
    1
}

fn three() -> usize {
    3
}

fn ten() -> usize {
    10
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapnetLayerCfg {
    /// Higher capsule channels; the class layer has one per class.
    pub out_channels: usize,
    /// Spatial extent of the routed blob (1 for the class layer).
    #[serde(default = "one")]
    pub out_size: usize,
    pub out_dim: usize,
    #[serde(default = "three")]
    pub iters: usize,
    #[serde(default)]
    pub axis: SoftmaxAxis,
}

/// Plain conv-BN-ReLU (`blocks` ignored) or a stack of residual basic blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VanillaStage {
    pub out: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default = "one")]
    pub blocks: usize,
    #[serde(default)]
    pub residual: bool,
}

impl VanillaStage {
    pub fn depth(&self) -> usize {
        if self.residual {
            2 * self.blocks
        } else {
            1
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OtSection {
    #[serde(flatten)]
    pub cfg: OtConfig,
    #[serde(default)]
    pub loss: FeedbackLoss,
}

impl Default for OtSection {
    fn default() -> Self {
        OtSection {
            cfg: OtConfig::default(),
            loss: FeedbackLoss::Sinkhorn,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub family: Family,
    #[serde(default = "ten")]
    pub classes: usize,
    pub input_channels: usize,
    pub input_size: usize,
    pub stem: Vec<StemLayer>,
    /// Capsule dimension the stem output is read with.
    #[serde(default = "one")]
    pub caps_dim: usize,
    /// Class capsule dimension of the capFC head.
    #[serde(default)]
    pub head_dim: usize,
    #[serde(default)]
    pub modules: Vec<ModuleSpec>,
    #[serde(default)]
    pub capnet: Vec<CapnetLayerCfg>,
    #[serde(default)]
    pub vanilla: Vec<VanillaStage>,
    #[serde(default)]
    pub ot: OtSection,
}

fn out_size(input: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    encap_autodiff::conv::conv_out_size(input, k, s, p)
}

impl NetworkConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: NetworkConfig = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Channel extent and spatial size after the stem.
    pub fn stem_output(&self) -> Result<(usize, usize)> {
        let mut c = self.input_channels;
        let mut s = self.input_size;
        for l in &self.stem {
            s = out_size(s, l.kernel, l.stride, l.pad).ok_or_else(|| Error::Config(format!("stem layer {l:?} does not fit a {s}×{s} input")))?;
            c = l.out;
        }
        Ok((c, s))
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.input_channels == 0 || self.input_size == 0 {
            return config("classes, input channels and input size must be positive");
        }
        let (c, mut s) = self.stem_output()?;
        match self.family {
            Family::Encapnet => {
                if self.modules.is_empty() || self.head_dim == 0 {
                    return config("encapnet needs at least one module and a head_dim");
                }
                if c % self.caps_dim != 0 {
                    return config(format!("stem output {c} is not a multiple of caps_dim {}", self.caps_dim));
                }
                let (mut ch, mut d) = (c / self.caps_dim, self.caps_dim);
                for (i, m) in self.modules.iter().enumerate() {
                    if m.channels != ch || m.in_dim != d {
                        return config(format!("module {} expects {}×{} capsules but receives {ch}×{d}", i + 1, m.channels, m.in_dim));
                    }
                    for l in m.layer_specs() {
                        l.validate()?;
                    }
                    s = out_size(s, 3, m.stride, 1).ok_or_else(|| Error::Config(format!("module {} does not fit {s}×{s}", i + 1)))?;
                    if !m.ot.is_empty() && m.channels * m.in_dim.min(m.out_dim) < 4 {
                        return config(format!("module {} feedback unit needs at least 4 lower channels", i + 1));
                    }
                    ch = m.channels;
                    d = m.out_dim;
                }
                if self.head_dim != d {
                    return config(format!("capFC keeps the capsule dim: head_dim {} vs last module dim {d}", self.head_dim));
                }
            }
            Family::CapnetDynamic | Family::CapnetEm => {
                if c % self.caps_dim != 0 {
                    return config(format!("stem output {c} is not a multiple of caps_dim {}", self.caps_dim));
                }
                let Some(last) = self.capnet.last() else {
                    return config("capnet family needs routing layers");
                };
                if last.out_channels != self.classes || last.out_size != 1 {
                    return config("the last routing layer must produce one 1×1 capsule per class");
                }
                if self.capnet.iter().any(|l| l.iters < 1 || l.out_dim == 0 || l.out_channels == 0) {
                    return config("routing layers need iters ≥ 1 and positive shapes");
                }
            }
            Family::VanillaCnn => {
                if self.vanilla.is_empty() {
                    return config("vanilla_cnn needs at least one stage");
                }
                for st in &self.vanilla {
                    s = out_size(s, 3, st.stride, 1).ok_or_else(|| Error::Config(format!("stage {st:?} does not fit {s}×{s}")))?;
                    if st.residual && st.blocks == 0 {
                        return config("residual stages need at least one block");
                    }
                }
            }
        }
        self.ot.cfg.validate()
    }

    /// Weighted layers on the main path, including stem and head.
    pub fn depth(&self) -> usize {
        let body: usize = match self.family {
            Family::Encapnet => self.modules.iter().map(|m| m.n + 1).sum::<usize>() + 1,
            Family::CapnetDynamic | Family::CapnetEm => self.capnet.len(),
            Family::VanillaCnn => self.vanilla.iter().map(VanillaStage::depth).sum::<usize>() + 1,
        };
        self.stem.len() + body
    }

    pub fn uses_ot(&self) -> bool {
        self.family == Family::Encapnet && self.modules.iter().any(|m| !m.ot.is_empty())
    }

    /// Six-layer desk-scale network on 32×32 single-channel input: four
    /// conv-BN-ReLU layers to a 32×8×8 blob (4 capsule channels of dim 8),
    /// one capsule layer to 4×16 capsules at 4×4, then 10×16 class capsules.
    pub fn six_layer(family: Family) -> Self {
        let stem = vec![
            StemLayer {
                out: 8,
                kernel: 3,
                stride: 1,
                pad: 1,
            },
            StemLayer {
                out: 16,
                kernel: 3,
                stride: 2,
                pad: 1,
            },
            StemLayer {
                out: 32,
                kernel: 3,
                stride: 2,
                pad: 1,
            },
            StemLayer {
                out: 32,
                kernel: 3,
                stride: 1,
                pad: 1,
            },
        ];
        let mut c = NetworkConfig {
            family,
            classes: 10,
            input_channels: 1,
            input_size: 32,
            stem,
            caps_dim: 8,
            head_dim: 0,
            modules: vec![],
            capnet: vec![],
            vanilla: vec![],
            ot: OtSection::default(),
        };
        match family {
            Family::Encapnet => {
                c.head_dim = 16;
                c.modules = vec![ModuleSpec {
                    channels: 4,
                    in_dim: 8,
                    out_dim: 16,
                    stride: 2,
                    n: 0,
                    skip: SkipMode::None,
                    interaction: Interaction::V3,
                    aide_inputs: Default::default(),
                    ot: vec![OtLink::Previous],
                }];
            }
            Family::CapnetDynamic | Family::CapnetEm => {
                c.capnet = vec![
                    CapnetLayerCfg {
                        out_channels: 4,
                        out_size: 4,
                        out_dim: 16,
                        iters: 3,
                        axis: SoftmaxAxis::Lower,
                    },
                    CapnetLayerCfg {
                        out_channels: 10,
                        out_size: 1,
                        out_dim: 16,
                        iters: 3,
                        axis: SoftmaxAxis::Lower,
                    },
                ];
            }
            Family::VanillaCnn => {
                c.caps_dim = 1;
                c.vanilla = vec![VanillaStage {
                    out: 64,
                    stride: 2,
                    blocks: 1,
                    residual: false,
                }];
            }
        }
        c
    }

    /// The 18-layer EncapNet of the architecture table: a 3→32 stem, four
    /// modules of one Type I and `n` Type II layers, capFC head.
    pub fn encapnet_v1(n: usize, classes: usize) -> Self {
        let dims = [(1, 2, 1), (2, 4, 2), (4, 8, 2), (8, 16, 2)];
        NetworkConfig {
            family: Family::Encapnet,
            classes,
            input_channels: 3,
            input_size: 32,
            stem: vec![StemLayer {
                out: 32,
                kernel: 3,
                stride: 1,
                pad: 1,
            }],
            caps_dim: 1,
            head_dim: 16,
            modules: dims
                .iter()
                .map(|&(i, o, s)| ModuleSpec {
                    channels: 32,
                    in_dim: i,
                    out_dim: o,
                    stride: s,
                    n,
                    skip: SkipMode::Both,
                    interaction: Interaction::V3,
                    aide_inputs: Default::default(),
                    ot: vec![OtLink::Previous, OtLink::Skip],
                })
                .collect(),
            capnet: vec![],
            vanilla: vec![],
            ot: OtSection::default(),
        }
    }

    /// ResNet counterpart with `n` basic blocks per stage.
    pub fn resnet(n: usize, classes: usize) -> Self {
        NetworkConfig {
            family: Family::VanillaCnn,
            classes,
            input_channels: 3,
            input_size: 32,
            stem: vec![StemLayer {
                out: 32,
                kernel: 3,
                stride: 1,
                pad: 1,
            }],
            caps_dim: 1,
            head_dim: 0,
            modules: vec![],
            capnet: vec![],
            vanilla: [(64, 1), (128, 2), (256, 2), (512, 2)]
                .iter()
                .map(|&(out, stride)| VanillaStage {
                    out,
                    stride,
                    blocks: n,
                    residual: true,
                })
                .collect(),
            ot: OtSection::default(),
        }
    }
}

/// Residual basic block: conv-BN-ReLU, conv-BN, shortcut, ReLU.
#[derive(Debug, Clone)]
pub struct BasicBlock {
    pub first: ConvBnRelu,
    pub conv: Conv,
    pub bn: BatchNorm,
    pub shortcut: Option<(Conv, BatchNorm)>,
}

impl BasicBlock {
    fn new<F: Real>(store: &mut ParamStore<F>, name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        let shortcut = (stride != 1 || cin != cout).then(|| {
            (
                Conv::new(store, &format!("{name}.proj"), cin, cout, 1, Conv2dCfg::new(stride, 0, 1)),
                BatchNorm::new(store, &format!("{name}.proj_bn"), cout),
            )
        });
        BasicBlock {
            first: ConvBnRelu::new(store, &format!("{name}.a"), cin, cout, 3, Conv2dCfg::new(stride, 1, 1)),
            conv: Conv::new(store, &format!("{name}.b.conv"), cout, cout, 3, Conv2dCfg::new(1, 1, 1)),
            bn: BatchNorm::new(store, &format!("{name}.b.bn"), cout),
            shortcut,
        }
    }

    fn forward<F: Real>(&self, ctx: &mut Ctx<F>, x: Var) -> Result<Var> {
        let y = self.first.forward(ctx, x)?;
        let y = self.conv.forward(ctx, y)?;
        let y = self.bn.forward(ctx, y)?;
        let s = match &self.shortcut {
            Some((c, b)) => {
                let s = c.forward(ctx, x)?;
                b.forward(ctx, s)?
            }
            None => x,
        };
        let y = ctx.g.add(y, s)?;
        Ok(ctx.g.relu(y))
    }
}

#[derive(Debug, Clone)]
pub enum VanillaLayer {
    Plain(ConvBnRelu),
    Residual(Vec<BasicBlock>),
}

#[derive(Debug, Clone)]
pub enum Body {
    Encap { modules: Vec<EncapModule>, head: CapFc },
    Capnet { layers: Vec<CapnetLayer> },
    Vanilla { stages: Vec<VanillaLayer>, fc: Linear },
}

/// Feedback units of one module.
#[derive(Debug, Clone)]
pub struct ModuleFeedback {
    pub module: usize,
    pub units: Vec<(OtLink, OtUnit)>,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub cfg: NetworkConfig,
    pub stem: Vec<ConvBnRelu>,
    pub body: Body,
    pub feedback: Vec<ModuleFeedback>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<F> {
    /// `[B, classes, d]`.
    pub classes: Var,
    /// Summed feedback divergence per module that has one.
    pub ot: Vec<(usize, Var)>,
    /// CapNet families: per routing layer.
    pub routing: Vec<CapnetOutput<F>>,
}

impl Network {
    /// Builds the network. Main-path parameters are created before the
    /// feedback units so their initial values do not depend on whether the
    /// regularizer is configured.
    pub fn build<F: Real>(cfg: &NetworkConfig, store: &mut ParamStore<F>) -> Result<Self> {
        cfg.validate()?;
        let mut cin = cfg.input_channels;
        let mut stem = Vec::with_capacity(cfg.stem.len());
        for (i, l) in cfg.stem.iter().enumerate() {
            stem.push(ConvBnRelu::new(
                store,
                &format!("stem{i}"),
                cin,
                l.out,
                l.kernel,
                Conv2dCfg::new(l.stride, l.pad, 1),
            ));
            cin = l.out;
        }
        let (c, size) = cfg.stem_output()?;
        let body = match cfg.family {
            Family::Encapnet => {
                let mut modules = Vec::new();
                let mut s = size;
                for (i, m) in cfg.modules.iter().enumerate() {
                    modules.push(EncapModule::new(store, &format!("m{}", i + 1), m.clone())?);
                    s = out_size(s, 3, m.stride, 1).expect("validated");
                }
                let last = cfg.modules.last().expect("validated");
                let head = CapFc::new(store, "head", last.channels * s * s, cfg.classes, cfg.head_dim);
                Body::Encap { modules, head }
            }
            Family::CapnetDynamic | Family::CapnetEm => {
                let method = if cfg.family == Family::CapnetEm {
                    RoutingMethod::Em
                } else {
                    RoutingMethod::Dynamic
                };
                let (mut ch, mut d) = (c / cfg.caps_dim, cfg.caps_dim);
                let mut layers = Vec::new();
                for (i, l) in cfg.capnet.iter().enumerate() {
                    let spec = CapnetSpec {
                        in_channels: ch,
                        in_dim: d,
                        out_channels: l.out_channels,
                        out_spatial: (l.out_size, l.out_size),
                        out_dim: l.out_dim,
                        method,
                        iters: l.iters,
                        axis: l.axis,
                    };
                    layers.push(CapnetLayer::new(store, &format!("route{}", i + 1), spec)?);
                    ch = l.out_channels;
                    d = l.out_dim;
                }
                Body::Capnet { layers }
            }
            Family::VanillaCnn => {
                let mut stages = Vec::new();
                let mut ch = c;
                for (i, st) in cfg.vanilla.iter().enumerate() {
                    let name = format!("stage{}", i + 1);
                    stages.push(if st.residual {
                        VanillaLayer::Residual(
                            (0..st.blocks)
                                .map(|b| {
                                    BasicBlock::new(
                                        store,
                                        &format!("{name}.{b}"),
                                        if b == 0 { ch } else { st.out },
                                        st.out,
                                        if b == 0 { st.stride } else { 1 },
                                    )
                                })
                                .collect(),
                        )
                    } else {
                        VanillaLayer::Plain(ConvBnRelu::new(store, &name, ch, st.out, 3, Conv2dCfg::new(st.stride, 1, 1)))
                    });
                    ch = st.out;
                }
                Body::Vanilla {
                    stages,
                    fc: Linear::new(store, "fc", ch, cfg.classes),
                }
            }
        };
        let mut feedback = Vec::new();
        if cfg.family == Family::Encapnet {
            for (i, m) in cfg.modules.iter().enumerate() {
                let mut units = Vec::new();
                for &link in &m.ot {
                    let (lower, stride) = match link {
                        OtLink::Previous => ((m.channels, m.in_dim), m.stride),
                        OtLink::Skip => ((m.channels, m.out_dim), 1),
                    };
                    let name = format!("m{}.ot_{}", i + 1, if link == OtLink::Previous { "previous" } else { "skip" });
                    units.push((
                        link,
                        OtUnit::new(store, &name, (m.channels, m.out_dim), lower, stride, cfg.ot.cfg, cfg.ot.loss)?,
                    ));
                }
                if !units.is_empty() {
                    feedback.push(ModuleFeedback { module: i + 1, units });
                }
            }
        }
        Ok(Network {
            cfg: cfg.clone(),
            stem,
            body,
            feedback,
        })
    }

    /// Weighted layers on the main path, counted from the built structure.
    pub fn depth(&self) -> usize {
        let body = match &self.body {
            Body::Encap { modules, .. } => modules.iter().map(EncapModule::depth).sum::<usize>() + 1,
            Body::Capnet { layers } => layers.len(),
            Body::Vanilla { stages, .. } => {
                stages
                    .iter()
                    .map(|s| match s {
                        VanillaLayer::Plain(_) => 1,
                        VanillaLayer::Residual(b) => 2 * b.len(),
                    })
                    .sum::<usize>()
                    + 1
            }
        };
        self.stem.len() + body
    }

    /// `images: [B, C, H, W]`. Feedback divergences are computed only when
    /// `with_ot` is set.
    pub fn forward<F: Real>(&self, ctx: &mut Ctx<F>, images: Var, with_ot: bool) -> Result<ForwardOutput<F>> {
        let mut x = images;
        for l in &self.stem {
            x = l.forward(ctx, x)?;
        }
        let mut ot = Vec::new();
        let mut routing = Vec::new();
        let classes = match &self.body {
            Body::Encap { modules, head } => {
                let grid = CapsuleGrid::new(ctx.g, x, self.cfg.caps_dim)?;
                let mut u = squash_grid(ctx.g, grid)?;
                for (i, m) in modules.iter().enumerate() {
                    let o = m.forward(ctx, u)?;
                    if with_ot {
                        if let Some(fb) = self.feedback.iter().find(|f| f.module == i + 1) {
                            let mut total = None;
                            for (link, unit) in &fb.units {
                                let target = match link {
                                    OtLink::Previous => u,
                                    OtLink::Skip => o.first,
                                };
                                let d = unit.forward(ctx, o.out, target)?;
                                total = Some(match total {
                                    None => d,
                                    Some(t) => ctx.g.add(t, d)?,
                                });
                            }
                            if let Some(t) = total {
                                ot.push((i + 1, t));
                            }
                        }
                    }
                    u = o.out;
                }
                head.forward(ctx, u)?
            }
            Body::Capnet { layers } => {
                let grid = CapsuleGrid::new(ctx.g, x, self.cfg.caps_dim)?;
                let mut u = squash_grid(ctx.g, grid)?;
                let mut a = None;
                let mut v = None;
                for l in layers {
                    if l.spec.method == RoutingMethod::Em && a.is_none() {
                        a = Some(grid_activations(ctx.g, u)?);
                    }
                    let o = l.forward(ctx, u, a)?;
                    u = o.grid;
                    a = o.activation;
                    v = Some(o.v);
                    routing.push(o);
                }
                v.expect("validated")
            }
            Body::Vanilla { stages, fc } => {
                for s in stages {
                    x = match s {
                        VanillaLayer::Plain(l) => l.forward(ctx, x)?,
                        VanillaLayer::Residual(blocks) => {
                            let mut y = x;
                            for b in blocks {
                                y = b.forward(ctx, y)?;
                            }
                            y
                        }
                    };
                }
                let s = ctx.g.shape(x).to_vec();
                let flat = ctx.g.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
                let pooled = ctx.g.mean_axis(flat, 2, false)?;
                let logits = fc.forward(ctx, pooled)?;
                let caps = ctx.g.reshape(logits, &[s[0], self.cfg.classes, 1])?;
                squash(ctx.g, caps, 2)?
            }
        };
        Ok(ForwardOutput { classes, ot, routing })
    }
}

/// Trainable parameter counts grouped by top-level layer name.
pub fn count_params<F: Real>(store: &ParamStore<F>) -> BTreeMap<String, usize> {
    let mut t = BTreeMap::new();
    for (_, p) in store.iter().filter(|(_, p)| p.trainable) {
        let key = p.name.split('.').next().unwrap_or("").to_string();
        *t.entry(key).or_insert(0) += p.value.len();
    }
    t
}

/// Parameters excluding the feedback units, which are dropped for inference.
pub fn count_inference_params<F: Real>(store: &ParamStore<F>) -> usize {
    store
        .iter()
        .filter(|(_, p)| p.trainable && !p.name.contains(".ot_"))
        .map(|(_, p)| p.value.len())
        .sum()
}

/// Mapping and routing sizes of one capsule layer, CapNet versus master/aide,
/// for `C` channels of `d1`-dim capsules on an `S×S` map routed to `n2`
/// capsules of dim `d2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ComplexityReport {
    pub channels: usize,
    pub spatial: usize,
    pub d1: usize,
    pub d2: usize,
    pub n2: usize,
    /// `C·n2·d2` output channels of the CapNet transform kernel.
    pub capnet_kernel_channels: usize,
    /// `C·n2·d2·d1`.
    pub capnet_mapping: usize,
    /// `n1·n2` routing coefficients with `n1 = C·S²`.
    pub capnet_routing: usize,
    /// Master plus aide transforms, `2·C·d1·d2`.
    pub master_aide_mapping: usize,
    /// Channel-interaction terms, `C²·d2`.
    pub master_aide_routing: usize,
}

impl ComplexityReport {
    pub fn new(channels: usize, spatial: usize, d1: usize, d2: usize, n2: usize) -> Self {
        let n1 = channels * spatial * spatial;
        ComplexityReport {
            channels,
            spatial,
            d1,
            d2,
            n2,
            capnet_kernel_channels: channels * n2 * d2,
            capnet_mapping: channels * n2 * d2 * d1,
            capnet_routing: n1 * n2,
            master_aide_mapping: 2 * channels * d1 * d2,
            master_aide_routing: channels * channels * d2,
        }
    }

    /// 32 channels of 8-dim capsules on an 8×8 map routed to 2048 16-dim capsules.
    pub fn reference() -> Self {
        Self::new(32, 8, 8, 16, 2048)
    }

    pub fn mapping_factor(&self) -> f64 {
        self.capnet_mapping as f64 / self.master_aide_mapping as f64
    }

    pub fn routing_factor(&self) -> f64 {
        self.capnet_routing as f64 / self.master_aide_routing as f64
    }

    pub fn rows(&self) -> Vec<(&'static str, String)> {
        vec![
            ("capnet_kernel_channels", self.capnet_kernel_channels.to_string()),
            ("capnet_mapping", self.capnet_mapping.to_string()),
            ("capnet_routing", self.capnet_routing.to_string()),
            ("master_aide_mapping", self.master_aide_mapping.to_string()),
            ("master_aide_routing", self.master_aide_routing.to_string()),
            ("mapping_factor", format!("{}", self.mapping_factor())),
            ("routing_factor", format!("{}", self.routing_factor())),
        ]
    }
}

/// Capsule-layer shape a CapNet routing layer would have in place of an
/// EncapNet module, for side-by-side reports.
pub fn capnet_spec_for(m: &ModuleSpec, spatial_out: usize) -> CapnetSpec {
    CapnetSpec {
        in_channels: m.channels,
        in_dim: m.in_dim,
        out_channels: m.channels,
        out_spatial: (spatial_out, spatial_out),
        out_dim: m.out_dim,
        method: RoutingMethod::Dynamic,
        iters: 3,
        axis: SoftmaxAxis::Lower,
    }
}
