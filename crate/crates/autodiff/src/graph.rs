//! The tape: a topologically ordered arena of nodes, each holding its forward
//! value and the operation that produced it.

use crate::broadcast::{self, broadcast_shape, reduce_to};
use crate::conv::{self, Conv2dCfg, ConvTranspose2dCfg};
use crate::error::{Error, Result};
use crate::real::{cast, gemm, Layout, Real};
use crate::tensor::{numel, strides, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel statistics computed by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats<F> {
    pub mean: Vec<F>,
    /// Biased (population) variance over the normalized axes.
    pub var: Vec<F>,
    /// Number of elements each channel statistic was taken over.
    pub count: usize,
}

#[derive(Debug, Clone)]
pub(crate) enum Op<F> {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, F),
    Offset(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    SumAll(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        cfg: Conv2dCfg,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        cfg: ConvTranspose2dCfg,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSumExp {
        x: Var,
        axis: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        invstd: Vec<F>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<F>,
        invstd: Vec<F>,
    },
}

impl<F> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(..) => "neg",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sqrt(..) => "sqrt",
            Op::Square(..) => "square",
            Op::SumAll(..) => "sum",
            Op::SumAxis { .. } => "sum_axis",
            Op::Reshape(..) => "reshape",
            Op::Permute { .. } => "permute",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul(..) => "batch_matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::Softmax { .. } => "softmax",
            Op::LogSumExp { .. } => "logsumexp",
            Op::BatchNorm { .. } => "batch_norm",
            Op::BatchNormEval { .. } => "batch_norm_eval",
        }
    }
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Reverse-mode tape. Values live on the graph until it is dropped.
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Tensor<F>>>,
    /// First node, in backward order, whose finite incoming gradient produced a non-finite one.
    grad_fault: Option<usize>,
    backpropagated: bool,
    accumulate: bool,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits `shape` around `axis` into `(outer, n, inner)` extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_fault: None,
            backpropagated: false,
            accumulate: false,
        }
    }

    /// When set, a second `backward` adds into existing leaf gradients
    /// instead of failing.
    pub fn set_accumulate(&mut self, on: bool) {
        self.accumulate = on;
    }

    pub fn clear_grads(&mut self) {
        self.grads.clear();
        self.grad_fault = None;
        self.backpropagated = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Trainable input: receives a gradient on `backward`.
    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Constant,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, value: F) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Same value, cut from the tape.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Gradient of the last `backward` loss with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Op whose backward pass first turned a finite gradient non-finite
    /// during the last [`Graph::backward`].
    pub fn first_non_finite_grad(&self) -> Option<(Var, &'static str)> {
        self.grad_fault.map(|i| (Var(i), self.nodes[i].op.name()))
    }

    /// Earliest node whose value holds a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<(Var, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.all_finite())
            .map(|(i, n)| (Var(i), n.op.name()))
    }

    /// Number of nodes produced by each op kind, in first-seen order.
    pub fn op_histogram(&self) -> Vec<(&'static str, usize)> {
        let mut out: Vec<(&'static str, usize)> = Vec::new();
        for n in &self.nodes {
            let name = n.op.name();
            match out.iter_mut().find(|(k, _)| *k == name) {
                Some((_, c)) => *c += 1,
                None => out.push((name, 1)),
            }
        }
        out
    }

    // ── elementwise ────────────────────────────────────────────────

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out = broadcast_shape(sa, sb).ok_or_else(|| Error::shape(op, format!("cannot broadcast {sa:?} with {sb:?}")))?;
        Ok(broadcast::binary(self.value(a), self.value(b), &out, f))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("div", a, b, |x, y| x / y)?;
        Ok(self.push(v, Op::Div(a, b), &[a, b]))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| -a);
        self.push(v, Op::Neg(x), &[x])
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let v = self.value(x).map(|a| a * c);
        self.push(v, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: F) -> Var {
        let v = self.value(x).map(|a| a + c);
        self.push(v, Op::Offset(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| if a > F::zero() { a } else { F::zero() });
        self.push(v, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| {
            if a >= F::zero() {
                F::one() / (F::one() + (-a).exp())
            } else {
                let e = a.exp();
                e / (F::one() + e)
            }
        });
        self.push(v, Op::Sigmoid(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(F::exp);
        self.push(v, Op::Exp(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|&&a| a < F::zero()) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("negative argument {bad}"),
            });
        }
        let v = self.value(x).map(F::ln);
        Ok(self.push(v, Op::Log(x), &[x]))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|&&a| a < F::zero()) {
            return Err(Error::Domain {
                op: "sqrt",
                detail: format!("negative argument {bad}"),
            });
        }
        let v = self.value(x).map(F::sqrt);
        Ok(self.push(v, Op::Sqrt(x), &[x]))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a * a);
        self.push(v, Op::Square(x), &[x])
    }

    // ── reductions ─────────────────────────────────────────────────

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, F::one() / cast(n as f64))
    }

    /// Sums over `axis`; with `keepdim` the axis stays with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("sum_axis", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let xd = self.value(x).data();
        let mut out = vec![F::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for k in 0..n {
                let src = &xd[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut out_shape = shape.clone();
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        let v = Tensor::from_parts(out_shape, out);
        let s = self.push(v, Op::SumAxis { x, axis }, &[x]);
        Ok(s)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let n = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| Error::shape("mean_axis", format!("axis {axis} out of range")))?;
        let s = self.sum_axis(x, axis, keepdim)?;
        Ok(self.scale(s, F::one() / cast(n as f64)))
    }

    // ── shape manipulation ─────────────────────────────────────────

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshaped(shape.to_vec())?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let v = permute_tensor(self.value(x), perm)?;
        Ok(self.push(v, Op::Permute { x, perm: perm.to_vec() }, &[x]))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{s:?} incompatible with {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let n = self.shape(v)[axis];
                out.extend_from_slice(&self.value(v).data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let v = Tensor::from_parts(shape, out);
        Ok(self.push(v, Op::Concat { xs: xs.to_vec(), axis }, xs))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(
                "narrow",
                format!("[{start}, {}) out of range on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&xd[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let v = Tensor::from_parts(out_shape, out);
        Ok(self.push(v, Op::Narrow { x, axis, start }, &[x]))
    }

    // ── linear algebra ─────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::zero(); m * n];
        gemm(
            m,
            k,
            n,
            F::one(),
            self.value(a).data(),
            Layout::row_major(k),
            self.value(b).data(),
            Layout::row_major(n),
            F::zero(),
            &mut out,
            Layout::row_major(n),
        );
        let v = Tensor::from_parts(vec![m, n], out);
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    /// `[B, m, k] x [B, k, n] -> [B, m, n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("batch_matmul", format!("{sa:?} x {sb:?}")));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![F::zero(); bs * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            gemm(
                m,
                k,
                n,
                F::one(),
                &ad[i * m * k..],
                Layout::row_major(k),
                &bd[i * k * n..],
                Layout::row_major(n),
                F::zero(),
                &mut out[i * m * n..],
                Layout::row_major(n),
            );
        }
        let v = Tensor::from_parts(vec![bs, m, n], out);
        Ok(self.push(v, Op::BatchMatMul(a, b), &[a, b]))
    }

    // ── convolution ────────────────────────────────────────────────

    /// Grouped convolution, `x: [B, Cin, H, W]`, `w: [Cout, Cin/groups, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, cfg: Conv2dCfg) -> Result<Var> {
        let v = conv::conv2d_forward(self.value(x), self.value(w), cfg)?;
        Ok(self.push(v, Op::Conv2d { x, w, cfg }, &[x, w]))
    }

    /// Adjoint of [`Graph::conv2d`]; `w: [Cin, Cout/groups, kh, kw]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, cfg: ConvTranspose2dCfg) -> Result<Var> {
        let v = conv::conv_transpose2d_forward(self.value(x), self.value(w), cfg)?;
        Ok(self.push(v, Op::ConvTranspose2d { x, w, cfg }, &[x, w]))
    }

    // ── normalization ──────────────────────────────────────────────

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let xd = self.value(x).data();
        let mut out = vec![F::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let m = (0..n).map(|k| xd[at(k)]).fold(F::neg_infinity(), F::max);
                let mut z = F::zero();
                for k in 0..n {
                    let e = (xd[at(k)] - m).exp();
                    out[at(k)] = e;
                    z += e;
                }
                for k in 0..n {
                    out[at(k)] /= z;
                }
            }
        }
        let v = Tensor::from_parts(shape, out);
        Ok(self.push(v, Op::Softmax { x, axis }, &[x]))
    }

    /// Max-stabilized `log Σ exp` over `axis`, which is removed.
    pub fn logsumexp(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("logsumexp", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let xd = self.value(x).data();
        let mut out = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let m = (0..n).map(|k| xd[at(k)]).fold(F::neg_infinity(), F::max);
                out[o * inner + i] = if m == F::neg_infinity() {
                    m
                } else {
                    m + (0..n).map(|k| (xd[at(k)] - m).exp()).sum::<F>().ln()
                };
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let v = Tensor::from_parts(out_shape, out);
        Ok(self.push(v, Op::LogSumExp { x, axis }, &[x]))
    }

    fn bn_dims(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(Error::shape("batch_norm", format!("need [B, C, ...], got {s:?}")));
        }
        let c = s[1];
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape(
                "batch_norm",
                format!("{c} channels but gamma/beta have {}/{}", self.value(gamma).len(), self.value(beta).len()),
            ));
        }
        Ok((s[0], c, numel(&s[2..])))
    }

    /// Training-mode batch norm over channel axis 1, using batch statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<(Var, BatchStats<F>)> {
        let (b, c, sp) = self.bn_dims(x, gamma, beta)?;
        let xd = self.value(x).data();
        let count = b * sp;
        let inv_n = F::one() / cast(count as f64);
        let mut mean = vec![F::zero(); c];
        let mut var = vec![F::zero(); c];
        for bi in 0..b {
            for ci in 0..c {
                let row = &xd[(bi * c + ci) * sp..(bi * c + ci + 1) * sp];
                mean[ci] += row.iter().copied().sum::<F>();
            }
        }
        mean.iter_mut().for_each(|m| *m *= inv_n);
        for bi in 0..b {
            for ci in 0..c {
                let row = &xd[(bi * c + ci) * sp..(bi * c + ci + 1) * sp];
                var[ci] += row.iter().map(|&v| (v - mean[ci]) * (v - mean[ci])).sum::<F>();
            }
        }
        var.iter_mut().for_each(|v| *v *= inv_n);
        let invstd: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![F::zero(); xd.len()];
        let mut out = vec![F::zero(); xd.len()];
        for bi in 0..b {
            for ci in 0..c {
                for s in 0..sp {
                    let i = (bi * c + ci) * sp + s;
                    xhat[i] = (xd[i] - mean[ci]) * invstd[ci];
                    out[i] = gd[ci] * xhat[i] + bd[ci];
                }
            }
        }
        let v = Tensor::from_parts(self.shape(x).to_vec(), out);
        let stats = BatchStats { mean, var, count };
        let y = self.push(v, Op::BatchNorm { x, gamma, beta, xhat, invstd }, &[x, gamma, beta]);
        Ok((y, stats))
    }

    /// Inference-mode batch norm with fixed statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[F], var: &[F], eps: F) -> Result<Var> {
        let (b, c, sp) = self.bn_dims(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape(
                "batch_norm",
                format!("running stats have {}/{} entries for {c} channels", mean.len(), var.len()),
            ));
        }
        let invstd: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let xd = self.value(x).data();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![F::zero(); xd.len()];
        for bi in 0..b {
            for ci in 0..c {
                for s in 0..sp {
                    let i = (bi * c + ci) * sp + s;
                    out[i] = gd[ci] * (xd[i] - mean[ci]) * invstd[ci] + bd[ci];
                }
            }
        }
        let v = Tensor::from_parts(self.shape(x).to_vec(), out);
        let op = Op::BatchNormEval {
            x,
            gamma,
            beta,
            mean: mean.to_vec(),
            invstd,
        };
        Ok(self.push(v, op, &[x, gamma, beta]))
    }

    // ── backward ───────────────────────────────────────────────────

    /// Populates gradients of the scalar `loss` for every leaf that feeds it.
    ///
    /// A second call without [`Graph::clear_grads`] is an error unless
    /// accumulation was enabled with [`Graph::set_accumulate`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        if self.backpropagated && !self.accumulate {
            return Err(Error::Contract("backward called twice without clear_grads".into()));
        }
        self.grads.resize(self.nodes.len(), None);
        if !self.nodes[loss.0].requires_grad {
            self.backpropagated = true;
            return Ok(());
        }
        let seed = Tensor::ones(self.shape(loss).to_vec());
        self.accumulate_grad(loss, seed);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[id].take() else { continue };
            let finite_in = self.grad_fault.is_none() && g.all_finite();
            for (v, t) in self.vjp(id, &g)? {
                if finite_in && self.grad_fault.is_none() && !t.all_finite() {
                    self.grad_fault = Some(id);
                }
                if self.nodes[v.0].requires_grad {
                    self.accumulate_grad(v, t);
                }
            }
        }
        self.backpropagated = true;
        Ok(())
    }

    fn accumulate_grad(&mut self, v: Var, g: Tensor<F>) {
        match &mut self.grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn vjp(&self, id: usize, g: &Tensor<F>) -> Result<Vec<(Var, Tensor<F>)>> {
        let node = &self.nodes[id];
        let y = &node.value;
        let mut out = Vec::new();
        let unary = |f: &dyn Fn(F, F, F) -> F, x: Var| -> Tensor<F> {
            let xd = self.value(x).data();
            let data = g.data().iter().zip(xd).zip(y.data()).map(|((&gi, &xi), &yi)| f(gi, xi, yi)).collect();
            Tensor::from_parts(g.shape().to_vec(), data)
        };
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                if self.rg(*a) {
                    out.push((*a, reduce_to(g.clone(), self.shape(*a))));
                }
                if self.rg(*b) {
                    out.push((*b, reduce_to(g.clone(), self.shape(*b))));
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    out.push((*a, reduce_to(g.clone(), self.shape(*a))));
                }
                if self.rg(*b) {
                    out.push((*b, reduce_to(g.map(|v| -v), self.shape(*b))));
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let t = broadcast::binary(g, self.value(*b), g.shape(), |gi, bi| gi * bi);
                    out.push((*a, reduce_to(t, self.shape(*a))));
                }
                if self.rg(*b) {
                    let t = broadcast::binary(g, self.value(*a), g.shape(), |gi, ai| gi * ai);
                    out.push((*b, reduce_to(t, self.shape(*b))));
                }
            }
            Op::Div(a, b) => {
                if self.rg(*a) {
                    let t = broadcast::binary(g, self.value(*b), g.shape(), |gi, bi| gi / bi);
                    out.push((*a, reduce_to(t, self.shape(*a))));
                }
                if self.rg(*b) {
                    // d(a/b)/db = -y / b
                    let gy = broadcast::binary(g, y, g.shape(), |gi, yi| gi * yi);
                    let t = broadcast::binary(&gy, self.value(*b), g.shape(), |v, bi| -v / bi);
                    out.push((*b, reduce_to(t, self.shape(*b))));
                }
            }
            Op::Neg(x) => out.push((*x, g.map(|v| -v))),
            Op::Scale(x, c) => {
                let c = *c;
                out.push((*x, g.map(|v| v * c)))
            }
            Op::Offset(x) => out.push((*x, g.clone())),
            Op::Relu(x) => out.push((*x, unary(&|gi, xi, _| if xi > F::zero() { gi } else { F::zero() }, *x))),
            Op::Sigmoid(x) => out.push((*x, unary(&|gi, _, yi| gi * yi * (F::one() - yi), *x))),
            Op::Exp(x) => out.push((*x, unary(&|gi, _, yi| gi * yi, *x))),
            Op::Log(x) => out.push((*x, unary(&|gi, xi, _| gi / xi, *x))),
            Op::Sqrt(x) => out.push((*x, unary(&|gi, _, yi| gi / (yi + yi), *x))),
            Op::Square(x) => out.push((*x, unary(&|gi, xi, _| gi * (xi + xi), *x))),
            Op::SumAll(x) => {
                let gv = g.item();
                out.push((*x, Tensor::full(self.shape(*x).to_vec(), gv)));
            }
            Op::SumAxis { x, axis } => {
                let shape = self.shape(*x).to_vec();
                let (outer, n, inner) = split_axis(&shape, *axis);
                let gd = g.data();
                let mut dx = vec![F::zero(); numel(&shape)];
                for o in 0..outer {
                    for k in 0..n {
                        dx[(o * n + k) * inner..(o * n + k + 1) * inner].copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                    }
                }
                out.push((*x, Tensor::from_parts(shape, dx)));
            }
            Op::Reshape(x) => out.push((*x, g.clone().reshaped(self.shape(*x).to_vec())?)),
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                out.push((*x, permute_tensor(g, &inv)?));
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(g.shape(), *axis);
                let mut offset = 0;
                for &v in xs {
                    let n = self.shape(v)[*axis];
                    if self.rg(v) {
                        let mut d = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            d.extend_from_slice(&g.data()[(o * total + offset) * inner..(o * total + offset + n) * inner]);
                        }
                        out.push((v, Tensor::from_parts(self.shape(v).to_vec(), d)));
                    }
                    offset += n;
                }
            }
            Op::Narrow { x, axis, start } => {
                let shape = self.shape(*x).to_vec();
                let (outer, n, inner) = split_axis(&shape, *axis);
                let len = g.shape()[*axis];
                let mut dx = vec![F::zero(); numel(&shape)];
                for o in 0..outer {
                    dx[(o * n + start) * inner..(o * n + start + len) * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                out.push((*x, Tensor::from_parts(shape, dx)));
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.rg(*a) {
                    let mut da = vec![F::zero(); m * k];
                    gemm(
                        m,
                        n,
                        k,
                        F::one(),
                        g.data(),
                        Layout::row_major(n),
                        self.value(*b).data(),
                        Layout::transposed(n),
                        F::zero(),
                        &mut da,
                        Layout::row_major(k),
                    );
                    out.push((*a, Tensor::from_parts(vec![m, k], da)));
                }
                if self.rg(*b) {
                    let mut db = vec![F::zero(); k * n];
                    gemm(
                        k,
                        m,
                        n,
                        F::one(),
                        self.value(*a).data(),
                        Layout::transposed(k),
                        g.data(),
                        Layout::row_major(n),
                        F::zero(),
                        &mut db,
                        Layout::row_major(n),
                    );
                    out.push((*b, Tensor::from_parts(vec![k, n], db)));
                }
            }
            Op::BatchMatMul(a, b) => {
                let (bs, m, k) = (self.shape(*a)[0], self.shape(*a)[1], self.shape(*a)[2]);
                let n = self.shape(*b)[2];
                let (ad, bd, gd) = (self.value(*a).data(), self.value(*b).data(), g.data());
                if self.rg(*a) {
                    let mut da = vec![F::zero(); bs * m * k];
                    for i in 0..bs {
                        gemm(
                            m,
                            n,
                            k,
                            F::one(),
                            &gd[i * m * n..],
                            Layout::row_major(n),
                            &bd[i * k * n..],
                            Layout::transposed(n),
                            F::zero(),
                            &mut da[i * m * k..],
                            Layout::row_major(k),
                        );
                    }
                    out.push((*a, Tensor::from_parts(vec![bs, m, k], da)));
                }
                if self.rg(*b) {
                    let mut db = vec![F::zero(); bs * k * n];
                    for i in 0..bs {
                        gemm(
                            k,
                            m,
                            n,
                            F::one(),
                            &ad[i * m * k..],
                            Layout::transposed(k),
                            &gd[i * m * n..],
                            Layout::row_major(n),
                            F::zero(),
                            &mut db[i * k * n..],
                            Layout::row_major(n),
                        );
                    }
                    out.push((*b, Tensor::from_parts(vec![bs, k, n], db)));
                }
            }
            Op::Conv2d { x, w, cfg } => {
                let (dx, dw) = conv::conv2d_backward(self.value(*x), self.value(*w), g, *cfg, self.rg(*x), self.rg(*w))?;
                out.extend(dx.map(|t| (*x, t)));
                out.extend(dw.map(|t| (*w, t)));
            }
            Op::ConvTranspose2d { x, w, cfg } => {
                let (dx, dw) = conv::conv_transpose2d_backward(self.value(*x), self.value(*w), g, *cfg, self.rg(*x), self.rg(*w))?;
                out.extend(dx.map(|t| (*x, t)));
                out.extend(dw.map(|t| (*w, t)));
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = split_axis(y.shape(), *axis);
                let (yd, gd) = (y.data(), g.data());
                let mut dx = vec![F::zero(); yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * n + k) * inner + i;
                        let dot: F = (0..n).map(|k| gd[at(k)] * yd[at(k)]).sum();
                        for k in 0..n {
                            dx[at(k)] = yd[at(k)] * (gd[at(k)] - dot);
                        }
                    }
                }
                out.push((*x, Tensor::from_parts(y.shape().to_vec(), dx)));
            }
            Op::LogSumExp { x, axis } => {
                let shape = self.shape(*x).to_vec();
                let (outer, n, inner) = split_axis(&shape, *axis);
                let (xd, yd, gd) = (self.value(*x).data(), y.data(), g.data());
                let mut dx = vec![F::zero(); xd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let r = o * inner + i;
                        if yd[r] == F::neg_infinity() {
                            continue;
                        }
                        for k in 0..n {
                            let j = (o * n + k) * inner + i;
                            dx[j] = gd[r] * (xd[j] - yd[r]).exp();
                        }
                    }
                }
                out.push((*x, Tensor::from_parts(shape, dx)));
            }
            Op::BatchNorm { x, gamma, beta, xhat, invstd } => {
                let (b, c, sp) = self.bn_dims(*x, *gamma, *beta)?;
                let gd = g.data();
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![F::zero(); c];
                let mut dbeta = vec![F::zero(); c];
                for bi in 0..b {
                    for ci in 0..c {
                        for s in 0..sp {
                            let i = (bi * c + ci) * sp + s;
                            dgamma[ci] += gd[i] * xhat[i];
                            dbeta[ci] += gd[i];
                        }
                    }
                }
                if self.rg(*x) {
                    let n: F = cast((b * sp) as f64);
                    let mut dx = vec![F::zero(); gd.len()];
                    for bi in 0..b {
                        for ci in 0..c {
                            let k = gam[ci] * invstd[ci] / n;
                            for s in 0..sp {
                                let i = (bi * c + ci) * sp + s;
                                dx[i] = k * (n * gd[i] - dbeta[ci] - xhat[i] * dgamma[ci]);
                            }
                        }
                    }
                    out.push((*x, Tensor::from_parts(g.shape().to_vec(), dx)));
                }
                if self.rg(*gamma) {
                    out.push((*gamma, Tensor::from_parts(self.shape(*gamma).to_vec(), dgamma)));
                }
                if self.rg(*beta) {
                    out.push((*beta, Tensor::from_parts(self.shape(*beta).to_vec(), dbeta)));
                }
            }
            Op::BatchNormEval { x, gamma, beta, mean, invstd } => {
                let (b, c, sp) = self.bn_dims(*x, *gamma, *beta)?;
                let (gd, xd) = (g.data(), self.value(*x).data());
                let gam = self.value(*gamma).data();
                let mut dx = vec![F::zero(); gd.len()];
                let mut dgamma = vec![F::zero(); c];
                let mut dbeta = vec![F::zero(); c];
                for bi in 0..b {
                    for ci in 0..c {
                        for s in 0..sp {
                            let i = (bi * c + ci) * sp + s;
                            dx[i] = gd[i] * gam[ci] * invstd[ci];
                            dgamma[ci] += gd[i] * (xd[i] - mean[ci]) * invstd[ci];
                            dbeta[ci] += gd[i];
                        }
                    }
                }
                if self.rg(*x) {
                    out.push((*x, Tensor::from_parts(g.shape().to_vec(), dx)));
                }
                if self.rg(*gamma) {
                    out.push((*gamma, Tensor::from_parts(self.shape(*gamma).to_vec(), dgamma)));
                }
                if self.rg(*beta) {
                    out.push((*beta, Tensor::from_parts(self.shape(*beta).to_vec(), dbeta)));
                }
            }
        }
        Ok(out)
    }
}

pub(crate) fn permute_tensor<F: Real>(t: &Tensor<F>, perm: &[usize]) -> Result<Tensor<F>> {
    let shape = t.shape();
    let mut seen = vec![false; shape.len()];
    if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::shape("permute", format!("{perm:?} is not a permutation of {} axes", shape.len())));
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let zeros = vec![0; out_shape.len()];
    let mut out = vec![F::zero(); t.len()];
    let td = t.data();
    broadcast::zip_indices(&out_shape, &src_strides, &zeros, |o, i, _| out[o] = td[i]);
    Ok(Tensor::from_parts(out_shape, out))
}
