//! Reverse-mode automatic differentiation on a recorded tape.
//!
//! Operations evaluate eagerly and append a node to the tape; nodes are
//! therefore stored in topological order and `backward` walks them in
//! reverse. Leaves may borrow parameter tensors so that building a graph
//! over a large model does not copy its weights.

use std::borrow::Cow;

use crate::tensor::{MathError, MathResult, Tensor};

/// Lower clamp applied to the argument of `log`.
pub const LOG_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the right operand of a binary op is broadcast against the left.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// rhs is `[n]`, lhs is `[rows × n]`.
    Row,
    /// rhs is a scalar.
    Scalar,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Neg(Var),
    Scale(Var, f64),
    AddConst(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sigmoid(Var),
    Softplus(Var),
    Tanh(Var),
    Relu(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    SumLastAxis(Var),
    SliceLast(Var, usize, usize),
    ConcatLast(Vec<Var>),
    GaussianBinLogProb {
        mean: Var,
        log_var: Var,
        edges: Vec<(f64, f64)>,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `var` (if any) into `target`'s gradient slot.
    pub fn accumulate_into(&self, var: Var, target: &mut Tensor) -> MathResult<()> {
        match self.get(var) {
            Some(g) => target.accumulate_grad(g),
            None => Ok(()),
        }
    }
}

/// A tape of tensor operations.
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a borrowed tensor as a leaf; it is differentiable iff the
    /// tensor has `requires_grad` set.
    pub fn leaf(&mut self, tensor: &'a Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        self.push_node(Cow::Borrowed(tensor), Op::Leaf, requires_grad)
    }

    /// Registers a borrowed tensor with an explicit differentiability flag.
    pub fn param(&mut self, tensor: &'a Tensor, trainable: bool) -> Var {
        self.push_node(Cow::Borrowed(tensor), Op::Leaf, trainable)
    }

    /// Registers an owned, non-differentiable tensor.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push_node(Cow::Owned(tensor), Op::Leaf, false)
    }

    /// Registers an owned tensor that gradients flow into.
    pub fn variable(&mut self, tensor: Tensor) -> Var {
        self.push_node(Cow::Owned(tensor), Op::Leaf, true)
    }

    /// A non-differentiable copy of `v`'s current value.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = Tensor::from_parts(self.shape(v).to_vec(), self.data(v).to_vec());
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn push_node(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op) -> MathResult<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(MathError::NonFinite { op: op_name });
        }
        let requires_grad = self.inputs(&op).iter().any(|&i| self.nodes[i.0].requires_grad);
        Ok(self.push_node(Cow::Owned(Tensor::from_parts(shape, data)), op, requires_grad))
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b, _) | Op::Sub(a, b, _) | Op::Mul(a, b, _) => vec![*a, *b],
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::AddConst(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Square(a)
            | Op::Sigmoid(a)
            | Op::Softplus(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Clamp(a, _, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumLastAxis(a)
            | Op::SliceLast(a, _, _) => vec![*a],
            Op::ConcatLast(parts) => parts.clone(),
            Op::GaussianBinLogProb { mean, log_var, .. } => vec![*mean, *log_var],
        }
    }

    // ── binary ops ───────────────────────────────────────────────────

    fn broadcast_kind(&self, op: &'static str, a: Var, b: Var) -> MathResult<Broadcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(Broadcast::Same)
        } else if sb.is_empty() {
            Ok(Broadcast::Scalar)
        } else if sa.len() == 2 && sb.len() == 1 && sb[0] == sa[1] {
            Ok(Broadcast::Row)
        } else {
            Err(MathError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(Var, Var, Broadcast) -> Op,
    ) -> MathResult<Var> {
        let kind = self.broadcast_kind(name, a, b)?;
        let (da, db) = (self.data(a), self.data(b));
        let data: Vec<f64> = match kind {
            Broadcast::Same => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Scalar => {
                let y = db[0];
                da.iter().map(|&x| f(x, y)).collect()
            }
            Broadcast::Row => {
                let n = db.len();
                da.iter().enumerate().map(|(i, &x)| f(x, db[i % n])).collect()
            }
        };
        let shape = self.shape(a).to_vec();
        self.push(name, shape, data, make(a, b, kind))
    }

    /// Elementwise sum; `b` may be a matching tensor, a row vector
    /// broadcast over the batch axis, or a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> MathResult<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> MathResult<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> MathResult<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// `[m × k] · [k × n] → [m × n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> MathResult<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(MathError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), (k, 1), self.data(b), (n, 1), &mut out, 0.0);
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b))
    }

    // ── unary ops ────────────────────────────────────────────────────

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> MathResult<Var> {
        let data: Vec<f64> = self.data(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(name, shape, data, op)
    }

    pub fn neg(&mut self, a: Var) -> MathResult<Var> {
        self.unary("neg", a, |x| -x, Op::Neg(a))
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> MathResult<Var> {
        self.unary("scale", a, |x| c * x, Op::Scale(a, c))
    }

    /// Adds a constant.
    pub fn add_const(&mut self, a: Var, c: f64) -> MathResult<Var> {
        self.unary("add_const", a, |x| x + c, Op::AddConst(a))
    }

    pub fn exp(&mut self, a: Var) -> MathResult<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    /// Natural log with the argument clamped below at [`LOG_FLOOR`].
    pub fn log(&mut self, a: Var) -> MathResult<Var> {
        self.unary("log", a, |x| x.max(LOG_FLOOR).ln(), Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> MathResult<Var> {
        self.unary("square", a, |x| x * x, Op::Square(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> MathResult<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> MathResult<Var> {
        self.unary("softplus", a, softplus, Op::Softplus(a))
    }

    pub fn tanh(&mut self, a: Var) -> MathResult<Var> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> MathResult<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> MathResult<Var> {
        if lo > hi {
            return Err(MathError::InvalidArgument {
                op: "clamp",
                reason: format!("lo {lo} > hi {hi}"),
            });
        }
        self.unary("clamp", a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    // ── reductions and reshaping ─────────────────────────────────────

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> MathResult<Var> {
        let s = self.data(a).iter().sum();
        self.push("sum", vec![], vec![s], Op::Sum(a))
    }

    /// Mean of all entries, as a scalar.
    pub fn mean(&mut self, a: Var) -> MathResult<Var> {
        let d = self.data(a);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.push("mean", vec![], vec![s], Op::Mean(a))
    }

    /// Sums over the last axis: `[rows × n] → [rows]`, `[n] → []`.
    pub fn sum_last_axis(&mut self, a: Var) -> MathResult<Var> {
        let shape = self.shape(a).to_vec();
        let Some((&n, lead)) = shape.split_last() else {
            return Err(MathError::InvalidArgument {
                op: "sum_last_axis",
                reason: "scalar input".into(),
            });
        };
        let data: Vec<f64> = self.data(a).chunks(n).map(|c| c.iter().sum()).collect();
        self.push("sum_last_axis", lead.to_vec(), data, Op::SumLastAxis(a))
    }

    /// Columns `[start, end)` along the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, end: usize) -> MathResult<Var> {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().unwrap_or(&1);
        if shape.is_empty() || start >= end || end > n {
            return Err(MathError::InvalidArgument {
                op: "slice_last",
                reason: format!("range {start}..{end} on shape {shape:?}"),
            });
        }
        let data: Vec<f64> = self
            .data(a)
            .chunks(n)
            .flat_map(|c| c[start..end].iter().copied())
            .collect();
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = end - start;
        self.push("slice_last", out_shape, data, Op::SliceLast(a, start, end))
    }

    /// Concatenates along the last axis; leading extents must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> MathResult<Var> {
        let first = parts.first().ok_or(MathError::InvalidArgument {
            op: "concat_last",
            reason: "no inputs".into(),
        })?;
        let lead = self.shape(*first).split_last().map(|(_, l)| l.to_vec()).unwrap_or_default();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(MathError::ShapeMismatch {
                    op: "concat_last",
                    lhs: self.shape(*first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        self.push("concat_last", shape, data, Op::ConcatLast(parts.to_vec()))
    }

    /// Elementwise `ln P(lo < X ≤ hi)` for `X ~ N(mean, exp(log_var))`, one
    /// bin `(lo, hi)` per element of `mean`. Infinite edges are allowed;
    /// `log_var` must be a scalar. The probability is clamped below at
    /// [`LOG_FLOOR`], with zero gradient when the clamp is active.
    pub fn gaussian_bin_log_prob(&mut self, mean: Var, log_var: Var, edges: Vec<(f64, f64)>) -> MathResult<Var> {
        if !self.shape(log_var).is_empty() {
            return Err(MathError::ShapeMismatch {
                op: "gaussian_bin_log_prob",
                lhs: vec![],
                rhs: self.shape(log_var).to_vec(),
            });
        }
        if edges.len() != self.value(mean).numel() {
            return Err(MathError::ShapeMismatch {
                op: "gaussian_bin_log_prob",
                lhs: self.shape(mean).to_vec(),
                rhs: vec![edges.len()],
            });
        }
        let sigma = (0.5 * self.data(log_var)[0]).exp();
        let data: Vec<f64> = self
            .data(mean)
            .iter()
            .zip(&edges)
            .map(|(&m, &(lo, hi))| bin_probability((lo - m) / sigma, (hi - m) / sigma).max(LOG_FLOOR).ln())
            .collect();
        let shape = self.shape(mean).to_vec();
        self.push(
            "gaussian_bin_log_prob",
            shape,
            data,
            Op::GaussianBinLogProb { mean, log_var, edges },
        )
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Propagates `output_grad` (shaped like `output`) back through the tape.
    pub fn backward(&self, output: Var, output_grad: &Tensor) -> MathResult<Gradients> {
        if output.0 >= self.nodes.len() {
            return Err(MathError::InvalidArgument {
                op: "backward",
                reason: "output is not on this graph".into(),
            });
        }
        if output_grad.shape() != self.shape(output) {
            return Err(MathError::ShapeMismatch {
                op: "backward",
                lhs: self.shape(output).to_vec(),
                rhs: output_grad.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(output_grad.data().to_vec());

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(Var(i), &g, &mut grads);
            // keep the node's own gradient available to callers
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Convenience for scalar outputs: seeds the backward pass with 1.
    pub fn backward_scalar(&self, output: Var) -> MathResult<Gradients> {
        let seed = Tensor::from_parts(self.shape(output).to_vec(), vec![1.0; self.value(output).numel()]);
        self.backward(output, &seed)
    }

    fn propagate(&self, v: Var, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = self.data(v);
        let wants = |x: Var| self.nodes[x.0].requires_grad;
        match &self.nodes[v.0].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if wants(*a) {
                    // dA = dC · Bᵀ
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, (n, 1), self.data(*b), (1, n), &mut da, 0.0);
                    add_into(grads, *a, da);
                }
                if wants(*b) {
                    // dB = Aᵀ · dC
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, self.data(*a), (1, k), g, (n, 1), &mut db, 0.0);
                    add_into(grads, *b, db);
                }
            }
            Op::Add(a, b, kind) => {
                if wants(*a) {
                    add_into(grads, *a, g.to_vec());
                }
                if wants(*b) {
                    add_into(grads, *b, reduce_broadcast(g, *kind, self.value(*b).numel()));
                }
            }
            Op::Sub(a, b, kind) => {
                if wants(*a) {
                    add_into(grads, *a, g.to_vec());
                }
                if wants(*b) {
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    add_into(grads, *b, reduce_broadcast(&neg, *kind, self.value(*b).numel()));
                }
            }
            Op::Mul(a, b, kind) => {
                let (da, db) = (self.data(*a), self.data(*b));
                let nb = db.len();
                let b_at = |i: usize| match kind {
                    Broadcast::Same => db[i],
                    Broadcast::Scalar => db[0],
                    Broadcast::Row => db[i % nb],
                };
                if wants(*a) {
                    let ga: Vec<f64> = g.iter().enumerate().map(|(i, &gi)| gi * b_at(i)).collect();
                    add_into(grads, *a, ga);
                }
                if wants(*b) {
                    let gb: Vec<f64> = g.iter().zip(da).map(|(&gi, &x)| gi * x).collect();
                    add_into(grads, *b, reduce_broadcast(&gb, *kind, nb));
                }
            }
            Op::Neg(a) => {
                if wants(*a) {
                    add_into(grads, *a, g.iter().map(|x| -x).collect());
                }
            }
            Op::Scale(a, c) => {
                if wants(*a) {
                    add_into(grads, *a, g.iter().map(|x| c * x).collect());
                }
            }
            Op::AddConst(a) => {
                if wants(*a) {
                    add_into(grads, *a, g.to_vec());
                }
            }
            Op::Exp(a) => self.elementwise_back(*a, g, out, grads, |_, y| y),
            Op::Log(a) => self.elementwise_back(*a, g, out, grads, |x, _| if x > LOG_FLOOR { 1.0 / x } else { 0.0 }),
            Op::Square(a) => self.elementwise_back(*a, g, out, grads, |x, _| 2.0 * x),
            Op::Sigmoid(a) => self.elementwise_back(*a, g, out, grads, |_, y| y * (1.0 - y)),
            Op::Softplus(a) => self.elementwise_back(*a, g, out, grads, |x, _| sigmoid(x)),
            Op::Tanh(a) => self.elementwise_back(*a, g, out, grads, |_, y| 1.0 - y * y),
            Op::Relu(a) => self.elementwise_back(*a, g, out, grads, |x, _| if x > 0.0 { 1.0 } else { 0.0 }),
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                self.elementwise_back(*a, g, out, grads, |x, _| if x >= lo && x <= hi { 1.0 } else { 0.0 })
            }
            Op::Sum(a) => {
                if wants(*a) {
                    add_into(grads, *a, vec![g[0]; self.value(*a).numel()]);
                }
            }
            Op::Mean(a) => {
                if wants(*a) {
                    let n = self.value(*a).numel();
                    add_into(grads, *a, vec![g[0] / n as f64; n]);
                }
            }
            Op::SumLastAxis(a) => {
                if wants(*a) {
                    let n = self.value(*a).cols();
                    let ga: Vec<f64> = g.iter().flat_map(|&gi| std::iter::repeat_n(gi, n)).collect();
                    add_into(grads, *a, ga);
                }
            }
            Op::SliceLast(a, start, end) => {
                if wants(*a) {
                    let n = self.value(*a).cols();
                    let w = end - start;
                    let mut ga = vec![0.0; self.value(*a).numel()];
                    for (r, chunk) in g.chunks(w).enumerate() {
                        ga[r * n + start..r * n + end].copy_from_slice(chunk);
                    }
                    add_into(grads, *a, ga);
                }
            }
            Op::ConcatLast(parts) => {
                let total = self.value(v).cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if wants(p) {
                        let gp: Vec<f64> = g
                            .chunks(total)
                            .flat_map(|row| row[offset..offset + w].iter().copied())
                            .collect();
                        add_into(grads, p, gp);
                    }
                    offset += w;
                }
            }
            Op::GaussianBinLogProb { mean, log_var, edges } => {
                let sigma = (0.5 * self.data(*log_var)[0]).exp();
                let mut g_mean = vec![0.0; edges.len()];
                let mut g_lv = 0.0;
                for (i, (&m, &(lo, hi))) in self.data(*mean).iter().zip(edges).enumerate() {
                    let (a, b) = ((lo - m) / sigma, (hi - m) / sigma);
                    let p = bin_probability(a, b);
                    if p <= LOG_FLOOR {
                        continue;
                    }
                    let (pa, pb) = (normal_pdf(a), normal_pdf(b));
                    // d/dm: (φ(a) − φ(b)) / (σ P)
                    g_mean[i] = g[i] * (pa - pb) / (sigma * p);
                    // d/d log σ²: −(b φ(b) − a φ(a)) / (2 P)
                    let (ta, tb) = (finite_or_zero(a * pa), finite_or_zero(b * pb));
                    g_lv += g[i] * -(tb - ta) / (2.0 * p);
                }
                if wants(*mean) {
                    add_into(grads, *mean, g_mean);
                }
                if wants(*log_var) {
                    add_into(grads, *log_var, vec![g_lv]);
                }
            }
        }
    }

    fn elementwise_back(
        &self,
        a: Var,
        g: &[f64],
        out: &[f64],
        grads: &mut [Option<Vec<f64>>],
        dfdx: impl Fn(f64, f64) -> f64,
    ) {
        if !self.nodes[a.0].requires_grad {
            return;
        }
        let ga: Vec<f64> = g
            .iter()
            .zip(self.data(a))
            .zip(out)
            .map(|((&gi, &x), &y)| gi * dfdx(x, y))
            .collect();
        add_into(grads, a, ga);
    }
}

fn add_into(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn reduce_broadcast(g: &[f64], kind: Broadcast, n: usize) -> Vec<f64> {
    match kind {
        Broadcast::Same => g.to_vec(),
        Broadcast::Scalar => vec![g.iter().sum()],
        Broadcast::Row => {
            let mut out = vec![0.0; n];
            for chunk in g.chunks(n) {
                out.iter_mut().zip(chunk).for_each(|(o, x)| *o += x);
            }
            out
        }
    }
}

fn finite_or_zero(x: f64) -> f64 {
    if x.is_finite() {
        x
    } else {
        0.0
    }
}

/// `C = A·B` for row-major operands described by `(row_stride, col_stride)`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    // SAFETY: the extents and strides describe slices of exactly
    // `a.len()`, `b.len()` and `c.len()` elements, checked by callers.
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn normal_pdf(x: f64) -> f64 {
    if x.is_infinite() {
        return 0.0;
    }
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// `Φ(b) − Φ(a)` for `a ≤ b`, evaluated on whichever tail avoids
/// cancellation.
pub fn bin_probability(a: f64, b: f64) -> f64 {
    let s = std::f64::consts::SQRT_2;
    if a >= 0.0 {
        0.5 * (libm::erfc(a / s) - libm::erfc(b / s))
    } else if b <= 0.0 {
        0.5 * (libm::erfc(-b / s) - libm::erfc(-a / s))
    } else {
        1.0 - 0.5 * libm::erfc(-a / s) - 0.5 * libm::erfc(b / s)
    }
}
