//! Named parameter storage and the per-step binding of parameters onto a graph.

use encap_autodiff::{cast, Graph, Real, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param<F> {
    pub name: String,
    pub value: Tensor<F>,
    /// Buffers (batch-norm running statistics) are stored but never optimized.
    pub trainable: bool,
}

/// Owns every parameter and buffer of a model.
///
/// Initialization draws from a ChaCha stream keyed by `(seed, parameter index)`,
/// so a parameter's initial value does not depend on how many numbers earlier
/// parameters consumed.
#[derive(Debug, Clone)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
    seed: u64,
}

pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// Gaussian with standard deviation `sqrt(2 / fan_in)`.
    He {
        fan_in: usize,
    },
    Normal {
        std: f64,
    },
}

impl<F: Real> ParamStore<F> {
    pub fn new(seed: u64) -> Self {
        ParamStore { params: Vec::new(), seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, init: Init) -> ParamId {
        let id = self.params.len();
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(id as u64);
        let mut normal = |std: f64| -> Vec<F> {
            (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    cast::<F>(std * z)
                })
                .collect()
        };
        let data = match init {
            Init::Zeros => vec![F::zero(); n],
            Init::Ones => vec![F::one(); n],
            Init::Const(c) => vec![cast(c); n],
            Init::He { fan_in } => normal((2.0 / fan_in.max(1) as f64).sqrt()),
            Init::Normal { std } => normal(std),
        };
        let value = Tensor::new(shape, data).expect("parameter shapes are positive");
        self.params.push(Param {
            name: name.into(),
            value,
            trainable: true,
        });
        ParamId(id)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, shape: Vec<usize>, init: Init) -> ParamId {
        let id = self.add(name, shape, init);
        self.params[id.0].trainable = false;
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn count_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn all_finite(&self) -> Option<&str> {
        self.params.iter().find(|p| !p.value.all_finite()).map(|p| p.name.as_str())
    }
}

/// One forward (and optionally backward) pass: a graph plus mutable access to
/// the store for running-statistic updates.
pub struct Ctx<'a, F: Real> {
    pub g: &'a mut Graph<F>,
    pub store: &'a mut ParamStore<F>,
    bound: Vec<Option<Var>>,
    pub training: bool,
    /// Bind parameters as gradient-receiving leaves.
    pub track: bool,
}

impl<'a, F: Real> Ctx<'a, F> {
    pub fn new(g: &'a mut Graph<F>, store: &'a mut ParamStore<F>, training: bool) -> Self {
        let n = store.len();
        Ctx {
            g,
            store,
            bound: vec![None; n],
            training,
            track: training,
        }
    }

    /// Forward pass whose parameters are constants.
    pub fn frozen(g: &'a mut Graph<F>, store: &'a mut ParamStore<F>, training: bool) -> Self {
        let mut c = Self::new(g, store, training);
        c.track = false;
        c
    }

    /// Uses `v` in place of the stored value of `id`.
    pub fn bind(&mut self, id: ParamId, v: Var) {
        if self.bound.len() <= id.0 {
            self.bound.resize(id.0 + 1, None);
        }
        self.bound[id.0] = Some(v);
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(Some(v)) = self.bound.get(id.0) {
            return *v;
        }
        let value = self.store.value(id).clone();
        let v = if self.track && self.store.get(id).trainable {
            self.g.leaf(value)
        } else {
            self.g.constant(value)
        };
        self.bind(id, v);
        v
    }

    /// Parameters that were bound as leaves during this pass.
    pub fn bound_params(&self) -> Vec<(ParamId, Var)> {
        self.bound.iter().enumerate().filter_map(|(i, v)| v.map(|v| (ParamId(i), v))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_order_independent() {
        let mut a = ParamStore::<f64>::new(7);
        let _ = a.add("x", vec![100], Init::Normal { std: 1.0 });
        let y1 = a.add("y", vec![4], Init::Normal { std: 1.0 });
        let mut b = ParamStore::<f64>::new(7);
        let _ = b.add("x", vec![3], Init::Normal { std: 1.0 });
        let y2 = b.add("y", vec![4], Init::Normal { std: 1.0 });
        assert_eq!(a.value(y1), b.value(y2));
    }

    #[test]
    fn he_init_scale() {
        let mut s = ParamStore::<f64>::new(1);
        let id = s.add("w", vec![20000], Init::He { fan_in: 50 });
        let v = s.value(id).data();
        let var = v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64;
        assert!((var - 2.0 / 50.0).abs() < 0.002);
    }

    #[test]
    fn buffers_are_constants() {
        let mut s = ParamStore::<f64>::new(1);
        let w = s.add("w", vec![2], Init::Ones);
        let b = s.add_buffer("b", vec![2], Init::Zeros);
        assert_eq!(s.count_trainable(), 2);
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &mut s, true);
        let (wv, bv) = (ctx.param(w), ctx.param(b));
        assert!(ctx.g.requires_grad(wv));
        assert!(!ctx.g.requires_grad(bv));
        assert_eq!(ctx.param(w), wv);
    }
}
