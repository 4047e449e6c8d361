//! Finite-difference gradient checks for every differentiable component,
//! shared by the test suite and the `gradcheck` CLI command.

use encap_autodiff::gradcheck::{check, relative_error, CheckCfg};
use encap_autodiff::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::capconv::{CapConvLayer, CapConvSpec, Interaction, ModuleSpec, OtLink, SkipMode};
use crate::capsule::{capfc, margin_loss, squash, CapsuleGrid, MarginCfg};
use crate::error::{Error, Result};
use crate::model::{Family, Network, NetworkConfig, OtSection, StemLayer};
use crate::params::{Ctx, ParamId, ParamStore};
use crate::routing::{dynamic_routing, em_routing, SoftmaxAxis};
use crate::sinkhorn::{ot_loss, sinkhorn_tensor, Extractor, Generator, OtConfig};
use crate::train::total_loss;

/// Pass threshold on the relative error.
pub const TOLERANCE: f64 = 1e-4;

pub const CHECKS: &[&str] = &[
    "squash",
    "capfc",
    "margin",
    "capconv",
    "dynamic",
    "em",
    "generator",
    "extractor",
    "ot_loss",
    "toy_net",
];

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub rel_err: f64,
    pub probes: usize,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.rel_err < TOLERANCE
    }
}

fn cfg() -> CheckCfg {
    CheckCfg { h: 1e-6, max_probes: Some(48) }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| scale * rng.random_range(-1.0..1.0))
}

/// Scalar readout `Σ x ⊙ R` with a fixed random `R`, so that no output
/// symmetry cancels the gradient.
fn readout(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = g.constant(random(&mut rng, g.shape(x), 1.0));
    let p = g.mul(x, r)?;
    Ok(g.sum(p))
}

/// Checks a parameterized component: the data inputs come first, then every
/// trainable parameter of `store`, each bound into a fresh context. With
/// `global`, the error is taken over all probed entries at once rather than
/// per tensor.
fn check_with_store<B>(data: Vec<Tensor<f64>>, store: &ParamStore<f64>, global: bool, build: B) -> Result<(f64, usize)>
where
    B: Fn(&mut Ctx<f64>, &[Var]) -> Result<Var>,
{
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.get(id).trainable).collect();
    let n_data = data.len();
    let mut inputs = data;
    inputs.extend(ids.iter().map(|&id| store.value(id).clone()));
    let r = check(&inputs, cfg(), |g, vars| {
        let mut scratch = store.clone();
        let mut ctx = Ctx::frozen(g, &mut scratch, true);
        for (&id, &v) in ids.iter().zip(&vars[n_data..]) {
            ctx.bind(id, v);
        }
        build(&mut ctx, &vars[..n_data])
    })?;
    Ok((if global { r.global_rel_err() } else { r.rel_err() }, r.probes()))
}

fn plain<B>(data: Vec<Tensor<f64>>, build: B) -> Result<(f64, usize)>
where
    B: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let r = check(&data, cfg(), build)?;
    Ok((r.rel_err(), r.probes()))
}

/// With `P` held constant the analytic gradient of `⟨Q, P⟩` is `P`; the
/// finite differences here perturb `Q` with the coupling of the unperturbed
/// cost frozen.
fn check_ot_loss(rng: &mut ChaCha8Rng) -> Result<(f64, usize)> {
    let n = 5;
    let q0 = Tensor::from_fn(vec![n, n], |_| rng.random_range(0.0..2.0));
    let ocfg = OtConfig::default();
    let mut g = Graph::new();
    let q = g.leaf(q0.clone());
    let loss = ot_loss(&mut g, q, &ocfg)?;
    g.backward(loss)?;
    let analytic = g.grad(q).expect("q is a leaf").data().to_vec();
    let p = sinkhorn_tensor(&q0, ocfg.eps, ocfg.iters)?.p;
    let h = cfg().h;
    let numeric: Vec<f64> = (0..n * n)
        .map(|i| {
            let f = |d: f64| {
                q0.data()
                    .iter()
                    .enumerate()
                    .map(|(k, &x)| (x + if k == i { d } else { 0.0 }) * p[k])
                    .sum::<f64>()
            };
            (f(h) - f(-h)) / (2.0 * h)
        })
        .collect();
    Ok((relative_error(&analytic, &numeric), n * n))
}

/// Two encapsulation modules with a feedback unit each, stem and capFC head,
/// differentiated end to end through `margin + λ Σ W̄`. The couplings stay on
/// the graph here so the finite differences see the same function.
///
/// The error is measured over the whole parameter vector: the last
/// extractor BN scale has a near-zero gradient (the cosine cost is scale
/// invariant) that central differences cannot resolve on its own.
pub fn toy_network() -> NetworkConfig {
    let mut c = NetworkConfig::six_layer(Family::Encapnet);
    c.classes = 3;
    c.input_size = 16;
    c.stem = vec![StemLayer {
        out: 8,
        kernel: 3,
        stride: 1,
        pad: 1,
    }];
    c.caps_dim = 2;
    c.head_dim = 4;
    let module = |in_dim, out_dim, n, skip| ModuleSpec {
        channels: 4,
        in_dim,
        out_dim,
        stride: 2,
        n,
        skip,
        interaction: Interaction::V3,
        aide_inputs: Default::default(),
        ot: vec![OtLink::Previous],
    };
    c.modules = vec![module(2, 2, 1, SkipMode::Both), module(2, 4, 0, SkipMode::None)];
    c.ot = OtSection {
        cfg: OtConfig {
            stop_gradient: false,
            iters: 5,
            ..OtConfig::default()
        },
        ..OtSection::default()
    };
    c
}

fn check_toy(rng: &mut ChaCha8Rng) -> Result<(f64, usize)> {
    let cfg = toy_network();
    let mut store = ParamStore::new(11);
    let net = Network::build(&cfg, &mut store)?;
    let x = random(rng, &[4, 1, 16, 16], 1.0);
    let labels = [0, 1, 2, 1];
    check_with_store(vec![x], &store, true, |ctx, v| {
        let out = net.forward(ctx, v[0], true)?;
        let ot: Vec<Var> = out.ot.iter().map(|(_, o)| *o).collect();
        Ok(total_loss(ctx.g, out.classes, &labels, &ot, 10.0, MarginCfg::default())?.total)
    })
}

pub fn run(name: &str) -> Result<SuiteEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (rel_err, probes) = match name {
        "squash" => plain(vec![random(&mut rng, &[3, 4, 5], 1.0)], |g, v| {
            let s = squash(g, v[0], 1)?;
            readout(g, s, 1)
        })?,
        "capfc" => plain(vec![random(&mut rng, &[2, 6, 4], 1.0), random(&mut rng, &[4, 6, 3], 0.5)], |g, v| {
            let y = capfc(g, v[0], v[1])?;
            readout(g, y, 2)
        })?,
        // Lengths spread over both hinges of the loss.
        "margin" => plain(vec![random(&mut rng, &[4, 5, 3], 0.6)], |g, v| {
            margin_loss(g, v[0], &[0, 3, 4, 1], MarginCfg::default())
        })?,
        "capconv" => {
            let spec = CapConvSpec::type_i(3, 2, 4, 2).with_interaction(Interaction::V3);
            let mut store = ParamStore::new(3);
            let layer = CapConvLayer::new(&mut store, "l", spec)?;
            check_with_store(vec![random(&mut rng, &[3, 6, 5, 5], 1.0)], &store, false, |ctx, v| {
                let u = CapsuleGrid::new(ctx.g, v[0], 2)?;
                let y = layer.forward(ctx, u)?.out;
                readout(ctx.g, y.var, 3)
            })?
        }
        "dynamic" => plain(vec![random(&mut rng, &[2, 5, 3, 4], 0.8)], |g, v| {
            let (y, _) = dynamic_routing(g, v[0], 3, SoftmaxAxis::Lower)?;
            readout(g, y, 4)
        })?,
        "em" => {
            let a = Tensor::from_fn(vec![2, 6], |_| rng.random_range(0.2..0.9));
            plain(
                vec![
                    random(&mut rng, &[2, 6, 3, 4], 1.0),
                    a,
                    random(&mut rng, &[3], 0.5),
                    random(&mut rng, &[3], 0.5),
                ],
                |g, v| {
                    let (o, _) = em_routing(g, v[0], v[1], v[2], v[3], 3)?;
                    let m = readout(g, o.mean, 5)?;
                    let a = readout(g, o.activation, 6)?;
                    Ok(g.add(m, a)?)
                },
            )?
        }
        "generator" => {
            let mut store = ParamStore::new(4);
            let gen = Generator::new(&mut store, "gen", 2, 4, 2, 2, 2)?;
            check_with_store(vec![random(&mut rng, &[3, 8, 3, 3], 1.0)], &store, false, |ctx, v| {
                let grid = CapsuleGrid::new(ctx.g, v[0], 4)?;
                let y = gen.forward(ctx, grid, &[3, 4, 6, 6])?;
                readout(ctx.g, y.var, 7)
            })?
        }
        "extractor" => {
            let mut store = ParamStore::new(5);
            let ext = Extractor::new(&mut store, "ext", 8)?;
            check_with_store(vec![random(&mut rng, &[4, 8, 6, 6], 1.0)], &store, false, |ctx, v| {
                let y = ext.forward(ctx, v[0])?;
                readout(ctx.g, y, 8)
            })?
        }
        "ot_loss" => check_ot_loss(&mut rng)?,
        "toy_net" => check_toy(&mut rng)?,
        other => return Err(Error::Input(format!("unknown gradient check {other:?}; known: {}", CHECKS.join(", ")))),
    };
    let name = CHECKS.iter().find(|&&c| c == name).expect("matched above");
    Ok(SuiteEntry { name, rel_err, probes })
}

pub fn run_all() -> Result<Vec<SuiteEntry>> {
    CHECKS.iter().map(|c| run(c)).collect()
}
