//! Optimizer, schedule, loss composition and the training loop.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use encap_autodiff::{cast, Graph, Real, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::capsule::{margin_loss, predict, MarginCfg};
use crate::checkpoint;
use crate::data::{batches, BatchCfg, Dataset};
use crate::error::{config, Error, Result};
use crate::model::{Network, NetworkConfig};
use crate::params::{Ctx, ParamId, ParamStore};
use crate::routing::{routing_histogram, HistogramRow};

/// Number of per-module OT columns in the metrics stream.
pub const OT_COLUMNS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub max_epoch: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Weight of the summed feedback divergences.
    pub lambda: f64,
    pub seed: u64,
    /// Multiplies `max_epoch` and every milestone.
    pub scale: f64,
    pub augment: bool,
    /// Side length images are zero-padded to before the stem.
    pub pad_to: usize,
    /// Use only the first `n` training samples; 0 uses all.
    pub train_samples: usize,
    pub margin: MarginCfg,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            milestones: vec![200, 300, 400],
            gamma: 0.1,
            max_epoch: 600,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 5e-4,
            batch_size: 128,
            lambda: 10.0,
            seed: 0,
            scale: 1.0,
            augment: true,
            pad_to: 32,
            train_samples: 0,
            margin: MarginCfg::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || self.batch_size < 1 || self.lr < 0.0 || self.scale <= 0.0 {
            return config(format!(
                "need lambda ≥ 0, batch ≥ 1, lr ≥ 0, scale > 0; got {} {} {} {}",
                self.lambda, self.batch_size, self.lr, self.scale
            ));
        }
        Ok(())
    }

    pub fn epochs(&self) -> usize {
        ((self.max_epoch as f64 * self.scale).round() as usize).max(1)
    }

    pub fn scaled_milestones(&self) -> Vec<usize> {
        self.milestones.iter().map(|&m| ((m as f64 * self.scale).round() as usize).max(1)).collect()
    }

    /// Learning rate for 0-based `epoch`: decayed by `gamma` once per
    /// milestone already reached.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let hits = self.scaled_milestones().iter().filter(|&&m| m <= epoch).count();
        self.lr * self.gamma.powi(hits as i32)
    }
}

/// Network plus training settings, as read from one config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub network: NetworkConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(text)?;
        c.network.validate()?;
        c.train.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Option<Vec<F>>>,
    v: Vec<Option<Vec<F>>>,
    t: Vec<u64>,
}

impl<F: Real> Adam<F> {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            weight_decay,
            m: vec![],
            v: vec![],
            t: vec![],
        }
    }

    pub fn from_config(c: &TrainConfig) -> Self {
        Self::new(c.beta1, c.beta2, c.adam_eps, c.weight_decay)
    }

    /// Updates every parameter that has a gradient; others are untouched.
    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &[(ParamId, Tensor<F>)], lr: f64) {
        let n = store.len();
        if self.m.len() < n {
            self.m.resize(n, None);
            self.v.resize(n, None);
            self.t.resize(n, 0);
        }
        let (b1, b2): (F, F) = (cast(self.beta1), cast(self.beta2));
        let eps: F = cast(self.eps);
        for (id, g) in grads {
            let i = id.index();
            self.t[i] += 1;
            let t = self.t[i] as i32;
            let c1: F = cast(1.0 - self.beta1.powi(t));
            let c2: F = cast(1.0 - self.beta2.powi(t));
            let len = g.len();
            let m = self.m[i].get_or_insert_with(|| vec![F::zero(); len]);
            let v = self.v[i].get_or_insert_with(|| vec![F::zero(); len]);
            let lr_f: F = cast(lr);
            let decay: F = cast(1.0 - lr * self.weight_decay);
            let p = store.value_mut(*id).data_mut();
            for k in 0..len {
                let gk = g.data()[k];
                m[k] = b1 * m[k] + (F::one() - b1) * gk;
                v[k] = b2 * v[k] + (F::one() - b2) * gk * gk;
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                p[k] = p[k] * decay - lr_f * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Pieces of the overall objective.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub margin: Var,
    /// `Σ` of the module divergences, when any were given.
    pub ot: Option<Var>,
}

/// `margin(t, v) + λ Σ_modules W̄`.
pub fn total_loss<F: Real>(g: &mut Graph<F>, v: Var, labels: &[usize], ot: &[Var], lambda: f64, margin: MarginCfg) -> Result<LossParts> {
    let m = margin_loss(g, v, labels, margin)?;
    if ot.is_empty() {
        return Ok(LossParts { total: m, margin: m, ot: None });
    }
    let mut sum = ot[0];
    for &o in &ot[1..] {
        sum = g.add(sum, o)?;
    }
    let weighted = g.scale(sum, cast(lambda));
    let total = g.add(m, weighted)?;
    Ok(LossParts {
        total,
        margin: m,
        ot: Some(sum),
    })
}

/// One row of the metrics stream.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: &'static str,
    pub loss: f64,
    pub margin: f64,
    pub error: f64,
    pub ot: [Option<f64>; OT_COLUMNS],
    pub lr: f64,
    pub wallclock: f64,
}

impl MetricsRow {
    pub const HEADER: &'static str = "epoch,split,loss,margin,error,ot_m1,ot_m2,ot_m3,ot_m4,lr,wallclock";

    pub fn to_csv(&self) -> String {
        let ot: Vec<String> = self.ot.iter().map(|o| o.map(|v| v.to_string()).unwrap_or_default()).collect();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.split,
            self.loss,
            self.margin,
            self.error,
            ot.join(","),
            self.lr,
            self.wallclock
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 11 {
            return Err(Error::Format(format!("metrics row has {} fields: {line}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Format(format!("bad number {s:?}")));
        let split = match f[1] {
            "train" => "train",
            "test" => "test",
            s => return Err(Error::Format(format!("unknown split {s}"))),
        };
        let mut ot = [None; OT_COLUMNS];
        for (k, s) in f[5..9].iter().enumerate() {
            ot[k] = if s.is_empty() { None } else { Some(num(s)?) };
        }
        Ok(MetricsRow {
            epoch: f[0].parse().map_err(|_| Error::Format(format!("bad epoch {}", f[0])))?,
            split,
            loss: num(f[2])?,
            margin: num(f[3])?,
            error: num(f[4])?,
            ot,
            lr: num(f[9])?,
            wallclock: num(f[10])?,
        })
    }
}

/// Aggregate of a pass over one split.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PassStats {
    pub samples: usize,
    pub margin: f64,
    /// Per-module mean divergence, indexed by module number − 1.
    pub ot: Vec<Option<f64>>,
    pub errors: usize,
}

impl PassStats {
    pub fn error(&self) -> f64 {
        if self.samples == 0 {
            0.0
        } else {
            self.errors as f64 / self.samples as f64
        }
    }

    /// `margin + λ Σ ot`.
    pub fn loss(&self, lambda: f64) -> f64 {
        self.margin + lambda * self.ot.iter().flatten().sum::<f64>()
    }

    fn ot_columns(&self) -> [Option<f64>; OT_COLUMNS] {
        let mut c = [None; OT_COLUMNS];
        for (k, v) in self.ot.iter().enumerate().take(OT_COLUMNS) {
            c[k] = *v;
        }
        c
    }
}

/// Scans every node, not just the loss: ReLU maps NaN to zero, so an
/// overflow upstream need not reach the loss.
fn check_forward<F: Real>(g: &Graph<F>) -> Result<()> {
    match g.first_non_finite() {
        None => Ok(()),
        Some((v, op)) => Err(Error::Diverged {
            stage: "forward",
            op,
            node: v.index(),
        }),
    }
}

/// Forward pass over a split without gradients, in eval mode. Batch-weighted
/// means of the margin loss and, when `with_ot`, of each module divergence.
pub fn evaluate<F: Real>(net: &Network, store: &mut ParamStore<F>, ds: &Dataset, batch_size: usize, pad_to: usize, with_ot: bool) -> Result<PassStats> {
    let cfg = BatchCfg {
        batch_size,
        shuffle_seed: None,
        augment: false,
        pad_to,
    };
    let mut stats = PassStats::default();
    let margin_cfg = MarginCfg::default();
    let mut ot_sums: Vec<Option<f64>> = vec![];
    for b in batches::<F>(ds, cfg, 0)? {
        let mut g = Graph::new();
        let x = g.constant(b.images);
        let mut ctx = Ctx::frozen(&mut g, store, false);
        let out = net.forward(&mut ctx, x, with_ot)?;
        let m = margin_loss(&mut g, out.classes, &b.labels, margin_cfg)?;
        check_forward(&g)?;
        let n = b.labels.len();
        stats.samples += n;
        stats.margin += g.value(m).item().to_f64().expect("finite") * n as f64;
        for (module, o) in &out.ot {
            if ot_sums.len() < *module {
                ot_sums.resize(*module, None);
            }
            let v = g.value(*o).item().to_f64().expect("finite") * n as f64;
            *ot_sums[module - 1].get_or_insert(0.0) += v;
        }
        let pred = predict(g.value(out.classes));
        stats.errors += pred.iter().zip(&b.labels).filter(|(p, l)| p != l).count();
    }
    if stats.samples > 0 {
        stats.margin /= stats.samples as f64;
        stats.ot = ot_sums.into_iter().map(|o| o.map(|s| s / stats.samples as f64)).collect();
    }
    Ok(stats)
}

/// Cosine histogram of the last routing layer on one batch, eval mode.
pub fn polarization<F: Real>(net: &Network, store: &mut ParamStore<F>, images: &Tensor<F>) -> Result<Vec<HistogramRow>> {
    let mut g = Graph::new();
    let x = g.constant(images.clone());
    let mut ctx = Ctx::frozen(&mut g, store, false);
    let out = net.forward(&mut ctx, x, false)?;
    let last = out
        .routing
        .last()
        .ok_or_else(|| Error::Config("polarization needs a network with routing layers".into()))?;
    routing_histogram(g.value(last.vhat), g.value(last.v))
}

pub struct Trainer<F: Real> {
    pub run: RunConfig,
    pub net: Network,
    pub store: ParamStore<F>,
    pub adam: Adam<F>,
    started: Option<Instant>,
}

/// Result of a full run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub rows: Vec<MetricsRow>,
    pub best_test_error: f64,
    pub best_epoch: usize,
}

impl<F: Real> Trainer<F> {
    pub fn new(run: RunConfig) -> Result<Self> {
        run.network.validate()?;
        run.train.validate()?;
        if let Some(m) = run.network.modules.iter().enumerate().skip(OT_COLUMNS).find(|(_, m)| !m.ot.is_empty()) {
            return config(format!("feedback units are logged for modules 1..={OT_COLUMNS}; module {} has one", m.0 + 1));
        }
        let mut store = ParamStore::new(run.train.seed);
        let net = Network::build(&run.network, &mut store)?;
        let adam = Adam::from_config(&run.train);
        Ok(Trainer {
            run,
            net,
            store,
            adam,
            started: None,
        })
    }

    pub fn with_ot(&self) -> bool {
        self.run.train.lambda > 0.0 && self.run.network.uses_ot()
    }

    fn train_ds(&self, ds: &Dataset) -> Dataset {
        match self.run.train.train_samples {
            0 => ds.clone(),
            n => ds.take(n),
        }
    }

    /// One optimization pass over `ds` at 0-based `epoch`.
    pub fn train_epoch(&mut self, ds: &Dataset, epoch: usize) -> Result<PassStats> {
        let tc = self.run.train.clone();
        let lr = tc.lr_at(epoch);
        let bcfg = BatchCfg {
            batch_size: tc.batch_size,
            shuffle_seed: Some(tc.seed),
            augment: tc.augment,
            pad_to: tc.pad_to,
        };
        let with_ot = self.with_ot();
        let mut stats = PassStats::default();
        let mut ot_sums: Vec<Option<f64>> = vec![];
        for b in batches::<F>(ds, bcfg, epoch as u64)? {
            let mut g = Graph::new();
            let x = g.constant(b.images);
            let (parts, classes, ot, bound) = {
                let mut ctx = Ctx::new(&mut g, &mut self.store, true);
                let out = self.net.forward(&mut ctx, x, with_ot)?;
                let ot_vars: Vec<Var> = out.ot.iter().map(|(_, v)| *v).collect();
                let parts = total_loss(ctx.g, out.classes, &b.labels, &ot_vars, tc.lambda, tc.margin)?;
                (parts, out.classes, out.ot, ctx.bound_params())
            };
            check_forward(&g)?;
            g.backward(parts.total)?;
            let mut grads = Vec::with_capacity(bound.len());
            for (id, v) in bound {
                if let Some(gr) = g.grad(v) {
                    if !gr.all_finite() {
                        let (node, op) = g.first_non_finite_grad().map(|(n, op)| (n.index(), op)).unwrap_or((v.index(), g.op_name(v)));
                        return Err(Error::Diverged { stage: "backward", op, node });
                    }
                    grads.push((id, gr.clone()));
                }
            }
            self.adam.step(&mut self.store, &grads, lr);
            if let Some(name) = self.store.all_finite() {
                log::error!("parameter {name} became non-finite");
                return Err(Error::Diverged {
                    stage: "update",
                    op: "adam",
                    node: 0,
                });
            }
            let n = b.labels.len();
            stats.samples += n;
            stats.margin += g.value(parts.margin).item().to_f64().expect("finite") * n as f64;
            for (module, o) in &ot {
                if ot_sums.len() < *module {
                    ot_sums.resize(*module, None);
                }
                *ot_sums[module - 1].get_or_insert(0.0) += g.value(*o).item().to_f64().expect("finite") * n as f64;
            }
            let pred = predict(g.value(classes));
            stats.errors += pred.iter().zip(&b.labels).filter(|(p, l)| p != l).count();
        }
        if stats.samples > 0 {
            stats.margin /= stats.samples as f64;
            stats.ot = ot_sums.into_iter().map(|o| o.map(|s| s / stats.samples as f64)).collect();
        }
        Ok(stats)
    }

    fn row(&self, epoch: usize, split: &'static str, s: &PassStats, lr: f64) -> MetricsRow {
        let wallclock = self.started.map(|t| t.elapsed().as_secs_f64()).unwrap_or(0.0);
        MetricsRow {
            epoch,
            split,
            loss: s.loss(self.run.train.lambda),
            margin: s.margin,
            error: s.error(),
            ot: s.ot_columns(),
            lr,
            wallclock,
        }
    }

    /// Epoch-0 rows: both splits evaluated at initialization.
    pub fn initial_rows(&mut self, train: &Dataset, test: &Dataset) -> Result<Vec<MetricsRow>> {
        let tc = self.run.train.clone();
        let with_ot = self.with_ot();
        let train_ds = self.train_ds(train);
        let tr = evaluate(&self.net, &mut self.store, &train_ds, tc.batch_size, tc.pad_to, with_ot)?;
        let te = evaluate(&self.net, &mut self.store, test, tc.batch_size, tc.pad_to, false)?;
        let lr = tc.lr_at(0);
        Ok(vec![self.row(0, "train", &tr, lr), self.row(0, "test", &te, lr)])
    }

    /// Full run. Rows go to `metrics` as they are produced; the best and last
    /// checkpoints go to `ckpt_dir`. `on_epoch` sees each finished epoch.
    pub fn run(
        &mut self,
        train: &Dataset,
        test: &Dataset,
        mut metrics: Option<&mut dyn Write>,
        ckpt_dir: Option<&Path>,
        mut on_epoch: impl FnMut(usize, &mut Self) -> Result<()>,
    ) -> Result<RunSummary> {
        fn emit(metrics: &mut Option<&mut dyn Write>, rows: &[MetricsRow], all: &mut Vec<MetricsRow>) -> Result<()> {
            for r in rows {
                if let Some(w) = metrics.as_deref_mut() {
                    writeln!(w, "{}", r.to_csv()).map_err(|e| Error::io("metrics", e))?;
                }
                log::info!("{}", r.to_csv());
            }
            all.extend_from_slice(rows);
            Ok(())
        }
        if let Some(w) = metrics.as_deref_mut() {
            writeln!(w, "{}", MetricsRow::HEADER).map_err(|e| Error::io("metrics", e))?;
        }
        let mut rows = Vec::new();
        let init = self.initial_rows(train, test)?;
        emit(&mut metrics, &init, &mut rows)?;
        on_epoch(0, self)?;
        let train_ds = self.train_ds(train);
        let text = self.run.to_toml();
        let (mut best, mut best_epoch) = (init[1].error, 0);
        self.started = Some(Instant::now());
        for epoch in 1..=self.run.train.epochs() {
            let lr = self.run.train.lr_at(epoch - 1);
            let tr = self.train_epoch(&train_ds, epoch - 1)?;
            let te = evaluate(&self.net, &mut self.store, test, self.run.train.batch_size, self.run.train.pad_to, false)?;
            let new = [self.row(epoch, "train", &tr, lr), self.row(epoch, "test", &te, lr)];
            emit(&mut metrics, &new, &mut rows)?;
            if let Some(dir) = ckpt_dir {
                if te.error() < best || epoch == 1 {
                    checkpoint::save(&dir.join("best.ckpt"), &self.store, &text)?;
                }
                checkpoint::save(&dir.join("last.ckpt"), &self.store, &text)?;
            }
            if te.error() < best {
                best = te.error();
                best_epoch = epoch;
            }
            on_epoch(epoch, self)?;
        }
        Ok(RunSummary {
            rows,
            best_test_error: best,
            best_epoch,
        })
    }
}

/// Restores a trainer from a checkpoint written by [`Trainer::run`].
pub fn load_checkpoint<F: Real>(path: &Path) -> Result<Trainer<F>> {
    let ckpt = checkpoint::load::<F>(path)?;
    let run = RunConfig::from_toml(&ckpt.config)?;
    let mut t = Trainer::new(run)?;
    checkpoint::restore(&ckpt, &mut t.store)?;
    Ok(t)
}

pub fn checkpoint_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.ckpt"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;

    #[test]
    fn schedule() {
        let c = TrainConfig {
            scale: 0.01,
            ..TrainConfig::default()
        };
        assert_eq!(c.epochs(), 6);
        assert_eq!(c.scaled_milestones(), vec![2, 3, 4]);
        assert_eq!(c.lr_at(0), 1e-4);
        assert!((c.lr_at(2) - 1e-5).abs() < 1e-20);
        assert!((c.lr_at(5) - 1e-7).abs() < 1e-21);
    }

    #[test]
    fn adam_zero_gradient_only_decays() {
        let mut s = ParamStore::<f64>::new(0);
        let id = s.add("w", vec![2], Init::Const(2.0));
        let mut a = Adam::new(0.9, 0.999, 1e-8, 0.5);
        a.step(&mut s, &[(id, Tensor::zeros(vec![2]))], 0.1);
        assert_eq!(s.value(id).data(), &[2.0 * 0.95, 2.0 * 0.95]);
    }

    #[test]
    fn adam_constant_gradient_step_is_lr() {
        let mut s = ParamStore::<f64>::new(0);
        let id = s.add("w", vec![1], Init::Zeros);
        let mut a = Adam::new(0.9, 0.999, 1e-8, 0.0);
        for _ in 0..50 {
            let before = s.value(id).item();
            a.step(&mut s, &[(id, Tensor::full(vec![1], 3.0))], 0.01);
            assert!(((before - s.value(id).item()) - 0.01).abs() < 1e-8);
        }
    }

    #[test]
    fn adam_minimizes_scalar_quadratic() {
        let mut s = ParamStore::<f64>::new(0);
        let id = s.add("w", vec![1], Init::Const(5.0));
        let mut a = Adam::new(0.9, 0.999, 1e-8, 0.0);
        for _ in 0..500 {
            let w = s.value(id).item();
            a.step(&mut s, &[(id, Tensor::full(vec![1], 2.0 * (w - 1.5)))], 0.05);
        }
        assert!((s.value(id).item() - 1.5).abs() < 1e-2);
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut g = Graph::<f64>::new();
        let v = g.constant(Tensor::new(vec![1, 2, 1], vec![0.9, 0.1]).unwrap());
        let a = g.scalar(0.1);
        let b = g.scalar(0.2);
        let p = total_loss(&mut g, v, &[0], &[a, b], 10.0, MarginCfg::default()).unwrap();
        assert!((g.value(p.total).item() - 3.0).abs() < 1e-12);
        let p0 = total_loss(&mut g, v, &[0], &[a, b], 0.0, MarginCfg::default()).unwrap();
        assert_eq!(g.value(p0.total).item(), g.value(p0.margin).item());
    }

    #[test]
    fn metrics_row_round_trip() {
        let r = MetricsRow {
            epoch: 3,
            split: "train",
            loss: 0.25,
            margin: 0.125,
            error: 0.5,
            ot: [Some(0.0125), None, None, None],
            lr: 1e-4,
            wallclock: 1.5,
        };
        assert_eq!(MetricsRow::parse(&r.to_csv()).unwrap(), r);
        assert_eq!(MetricsRow::HEADER.split(',').count(), 11);
    }
}
