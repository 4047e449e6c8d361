//! Plain (non-capsule) building blocks.

use encap_autodiff::{cast, Conv2dCfg, Real, Var};

use crate::error::Result;
use crate::params::{Ctx, Init, ParamId, ParamStore};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Bias-free 2-D convolution; every use in the network is followed by batch norm.
#[derive(Debug, Clone)]
pub struct Conv {
    pub w: ParamId,
    pub cfg: Conv2dCfg,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
}

impl Conv {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, cin: usize, cout: usize, kernel: usize, cfg: Conv2dCfg) -> Self {
        let fan_in = cin / cfg.groups * kernel * kernel;
        let w = store.add(format!("{name}.weight"), vec![cout, cin / cfg.groups, kernel, kernel], Init::He { fan_in });
        Conv { w, cfg, cin, cout, kernel }
    }

    pub fn forward<F: Real>(&self, ctx: &mut Ctx<F>, x: Var) -> Result<Var> {
        let w = ctx.param(self.w);
        Ok(ctx.g.conv2d(x, w, self.cfg)?)
    }
}

/// Batch norm over axis 1 with running statistics kept as store buffers.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: store.add(format!("{name}.gamma"), vec![channels], Init::Ones),
            beta: store.add(format!("{name}.beta"), vec![channels], Init::Zeros),
            running_mean: store.add_buffer(format!("{name}.running_mean"), vec![channels], Init::Zeros),
            running_var: store.add_buffer(format!("{name}.running_var"), vec![channels], Init::Ones),
            channels,
        }
    }

    /// Training mode normalizes with batch statistics and folds them into the
    /// running estimates (unbiased variance, momentum 0.1); eval mode uses the
    /// running estimates.
    pub fn forward<F: Real>(&self, ctx: &mut Ctx<F>, x: Var) -> Result<Var> {
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        let eps = cast(BN_EPS);
        if ctx.training {
            let (y, stats) = ctx.g.batch_norm_train(x, gamma, beta, eps)?;
            let m: F = cast(BN_MOMENTUM);
            let n = stats.count as f64;
            let unbias: F = cast(if n > 1.0 { n / (n - 1.0) } else { 1.0 });
            let rm = ctx.store.value_mut(self.running_mean).data_mut();
            for (r, &b) in rm.iter_mut().zip(&stats.mean) {
                *r = (F::one() - m) * *r + m * b;
            }
            let rv = ctx.store.value_mut(self.running_var).data_mut();
            for (r, &b) in rv.iter_mut().zip(&stats.var) {
                *r = (F::one() - m) * *r + m * b * unbias;
            }
            Ok(y)
        } else {
            let mean = ctx.store.value(self.running_mean).data().to_vec();
            let var = ctx.store.value(self.running_var).data().to_vec();
            Ok(ctx.g.batch_norm_eval(x, gamma, beta, &mean, &var, eps)?)
        }
    }
}

/// `y = x · W + b` on `[B, in]` inputs.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, input: usize, output: usize) -> Self {
        Linear {
            w: store.add(format!("{name}.weight"), vec![input, output], Init::He { fan_in: input }),
            b: store.add(format!("{name}.bias"), vec![output], Init::Zeros),
        }
    }

    pub fn forward<F: Real>(&self, ctx: &mut Ctx<F>, x: Var) -> Result<Var> {
        let w = ctx.param(self.w);
        let b = ctx.param(self.b);
        let y = ctx.g.matmul(x, w)?;
        Ok(ctx.g.add(y, b)?)
    }
}

/// Conv → BN → ReLU.
#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBnRelu {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, cin: usize, cout: usize, kernel: usize, cfg: Conv2dCfg) -> Self {
        ConvBnRelu {
            conv: Conv::new(store, &format!("{name}.conv"), cin, cout, kernel, cfg),
            bn: BatchNorm::new(store, &format!("{name}.bn"), cout),
        }
    }

    pub fn forward<F: Real>(&self, ctx: &mut Ctx<F>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        Ok(ctx.g.relu(y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use encap_autodiff::{Graph, Tensor};

    #[test]
    fn running_stats_follow_momentum() {
        let mut store = ParamStore::<f64>::new(0);
        let bn = BatchNorm::new(&mut store, "bn", 1);
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 1, 1, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap());
        let mut ctx = Ctx::new(&mut g, &mut store, true);
        bn.forward(&mut ctx, x).unwrap();
        // batch mean 4, unbiased var 20/3
        assert!((store.value(bn.running_mean).item() - 0.4).abs() < 1e-12);
        assert!((store.value(bn.running_var).item() - (0.9 + 0.1 * 20.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn eval_mode_is_pure() {
        let mut store = ParamStore::<f64>::new(0);
        let bn = BatchNorm::new(&mut store, "bn", 2);
        let before = store.clone();
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(vec![2, 2, 2, 2], |i| i as f64));
        let mut ctx = Ctx::new(&mut g, &mut store, false);
        let y = bn.forward(&mut ctx, x).unwrap();
        // Identity running stats: output ≈ input.
        assert!(g.value(y).max_abs_diff(g.value(x)) < 1e-4);
        assert_eq!(store.value(bn.running_mean), before.value(bn.running_mean));
    }
}
