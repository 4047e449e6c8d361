//! Central-difference gradient checking on `f64` graphs.

use crate::error::Error;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct CheckCfg {
    /// Finite-difference step.
    pub h: f64,
    /// Upper bound on probed coordinates per input; `None` probes all of them.
    pub max_probes: Option<usize>,
}

impl Default for CheckCfg {
    fn default() -> Self {
        CheckCfg { h: 1e-5, max_probes: None }
    }
}

#[derive(Debug, Clone)]
pub struct InputReport {
    pub probes: usize,
    pub rel_err: f64,
    pub max_abs_err: f64,
    /// Flat index with the largest absolute discrepancy.
    pub worst_index: usize,
    /// Probed gradient entries, reverse mode and central difference.
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub inputs: Vec<InputReport>,
}

impl CheckReport {
    /// Worst per-input relative error.
    pub fn rel_err(&self) -> f64 {
        self.inputs.iter().map(|r| r.rel_err).fold(0.0, f64::max)
    }

    /// Relative error of all probed entries taken as one vector.
    pub fn global_rel_err(&self) -> f64 {
        let a: Vec<f64> = self.inputs.iter().flat_map(|r| r.analytic.iter().copied()).collect();
        let n: Vec<f64> = self.inputs.iter().flat_map(|r| r.numeric.iter().copied()).collect();
        relative_error(&a, &n)
    }

    pub fn probes(&self) -> usize {
        self.inputs.iter().map(|r| r.probes).sum()
    }
}

/// Relative error `‖a − n‖ / max(‖a‖ + ‖n‖, 1e-12)` between two gradient
/// samples. Tensor-level rather than elementwise so that coordinates with a
/// vanishing true gradient do not dominate through rounding noise.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / (na + nn).max(1e-12)
}

/// Evenly spaced probe positions, always including the first and last.
fn probe_indices(len: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < len && m > 1 => (0..m).map(|i| i * (len - 1) / (m - 1)).collect(),
        Some(1) if len > 1 => vec![len / 2],
        _ => (0..len).collect(),
    }
}

/// Compares reverse-mode gradients of `build` against central differences.
///
/// `build` receives a fresh graph and one leaf per entry of `inputs`, and
/// must return a scalar. It is re-run for every perturbation, so it has to
/// be deterministic.
pub fn check<B, E>(inputs: &[Tensor<f64>], cfg: CheckCfg, build: B) -> std::result::Result<CheckReport, E>
where
    B: Fn(&mut Graph<f64>, &[Var]) -> std::result::Result<Var, E>,
    E: From<Error>,
{
    let eval = |xs: &[Tensor<f64>]| -> std::result::Result<f64, E> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone())).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut reports = Vec::with_capacity(inputs.len());
    for (k, &v) in vars.iter().enumerate() {
        let analytic_full = match g.grad(v) {
            Some(t) => t.data().to_vec(),
            None => vec![0.0; inputs[k].len()],
        };
        let idx = probe_indices(inputs[k].len(), cfg.max_probes);
        let mut analytic = Vec::with_capacity(idx.len());
        let mut numeric = Vec::with_capacity(idx.len());
        for &i in &idx {
            let x0 = work[k].data()[i];
            work[k].data_mut()[i] = x0 + cfg.h;
            let fp = eval(&work)?;
            work[k].data_mut()[i] = x0 - cfg.h;
            let fm = eval(&work)?;
            work[k].data_mut()[i] = x0;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::Contract(format!("non-finite loss while probing input {k} at {i}")).into());
            }
            analytic.push(analytic_full[i]);
            numeric.push((fp - fm) / (2.0 * cfg.h));
        }
        let (worst, max_abs) = analytic
            .iter()
            .zip(&numeric)
            .enumerate()
            .map(|(j, (a, n))| (idx[j], (a - n).abs()))
            .fold((0, 0.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        reports.push(InputReport {
            probes: idx.len(),
            rel_err: relative_error(&analytic, &numeric),
            max_abs_err: max_abs,
            worst_index: worst,
            analytic,
            numeric,
        });
    }
    Ok(CheckReport { inputs: reports })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probes_cover_ends() {
        assert_eq!(probe_indices(10, Some(3)), vec![0, 4, 9]);
        assert_eq!(probe_indices(4, Some(10)), vec![0, 1, 2, 3]);
        assert_eq!(probe_indices(4, None).len(), 4);
    }

    #[test]
    fn cubic_gradient_matches() {
        let x = Tensor::new(vec![3], vec![0.3, -1.2, 2.0]).unwrap();
        let r = check::<_, Error>(&[x], CheckCfg::default(), |g, v| {
            let sq = g.square(v[0]);
            let cube = g.mul(sq, v[0])?;
            Ok(g.sum(cube))
        })
        .unwrap();
        assert!(r.rel_err() < 1e-8, "{r:?}");
    }

    #[test]
    fn wrong_gradient_is_detected() {
        // relu at exactly 0 has a one-sided derivative; central differences see 1/2.
        let x = Tensor::new(vec![1], vec![0.0]).unwrap();
        let r = check::<_, Error>(&[x], CheckCfg::default(), |g, v| {
            let y = g.relu(v[0]);
            Ok(g.sum(y))
        })
        .unwrap();
        assert!(r.rel_err() > 0.1);
    }
}
