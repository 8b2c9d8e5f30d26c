//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is built fresh for every forward pass. Leaves are copied in
//! from [`Tensor`]s; every op appends a node holding its value and the
//! handles of its inputs. [`Tape::backward`] walks the nodes in reverse and
//! returns a [`Gradients`] table keyed by [`Var`].
//!
//! Nodes whose inputs all lack `requires_grad` are recorded as constants and
//! never receive a gradient, which is how frozen encoders stay frozen.

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softplus(Var),
    L2Normalize { x: Var, divisors: Vec<f64>, eps: f64 },
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    RowDot(Var, Var),
    LogSumExpRows(Var),
    ConcatCols(Var, Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Stores the gradient of `var` into `tensor.grad` when the tensor
    /// tracks gradients; otherwise leaves it untouched.
    pub fn write_to(&self, var: Var, tensor: &mut Tensor) -> Result<()> {
        if !tensor.requires_grad() {
            return Ok(());
        }
        let g = self
            .get(var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; tensor.numel()]);
        tensor.set_grad(g)
    }
}

fn cols_of(shape: &[usize]) -> usize {
    match shape.len() {
        0 => 1,
        1 => shape[0],
        _ => shape[1..].iter().product(),
    }
}

fn rows_of(shape: &[usize]) -> usize {
    if shape.len() >= 2 {
        shape[0]
    } else {
        1
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: &[f64]) {
    match slot {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(delta) {
                *a += b;
            }
        }
        None => *slot = Some(delta.to_vec()),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a copy of `t`. Tracks gradients iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push_raw(t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), Op::Leaf)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push_raw(t.shape().to_vec(), t.data().to_vec(), false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("node shape is consistent")
    }

    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        let n = &self.nodes[v.0];
        if n.value.len() != 1 {
            return Err(Error::shape("scalar_value", &n.shape, &[]));
        }
        Ok(n.value[0])
    }

    fn push_raw(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, shape: Vec<usize>, value: Vec<f64>, inputs: &[Var], op: Op) -> Result<Var> {
        if let Some(pos) = value.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: format!("{name} (element {pos}, value {})", value[pos]),
            });
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(shape, value, rg, op))
    }

    fn matrix(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = &self.nodes[v.0].shape;
        if s.len() != 2 {
            return Err(Error::shape(op, s, &[]));
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul")?;
        let (k2, n) = self.matrix(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let v = tensor::mm(self.value(a), self.value(b), m, k, n);
        self.push("matmul", vec![m, n], v, &[a, b], Op::MatMul(a, b))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul_nt")?;
        let (n, k2) = self.matrix(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", self.shape(a), self.shape(b)));
        }
        let v = tensor::mm_nt(self.value(a), self.value(b), m, k, n);
        self.push("matmul_nt", vec![m, n], v, &[a, b], Op::MatMulNt(a, b))
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| f(*x, *y)).collect();
        let shape = self.shape(a).to_vec();
        self.push(name, shape, v, &[a, b], op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.matrix(x, "add_bias")?;
        if self.nodes[bias.0].value.len() != n {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias);
        let v: Vec<f64> = self
            .value(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(x, b)| x + b))
            .collect();
        let shape = self.shape(x).to_vec();
        self.push("add_bias", shape, v, &[x, bias], Op::AddBias(x, bias))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let v = self.value(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push("scale", shape, v, &[x], Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).iter().map(|v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        self.push("relu", shape, v, &[x], Op::Relu(x))
    }

    /// `ln(1 + eˣ)`, evaluated stably.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).iter().map(|&v| softplus(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push("softplus", shape, v, &[x], Op::Softplus(x))
    }

    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (_, n) = self.matrix(x, "l2_normalize_rows")?;
        if eps <= 0.0 || !eps.is_finite() {
            return Err(Error::invalid(format!("eps must be positive, got {eps}")));
        }
        let (v, divisors) = tensor::l2_normalize_rows(self.value(x), n, eps);
        let shape = self.shape(x).to_vec();
        self.push("l2_normalize_rows", shape, v, &[x], Op::L2Normalize { x, divisors, eps })
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.matrix(x, "softmax_rows")?;
        if n == 0 {
            return Err(Error::shape("softmax_rows", &[m, n], &[m, 1]));
        }
        let v = tensor::softmax_rows(self.value(x), n);
        self.push("softmax_rows", vec![m, n], v, &[x], Op::SoftmaxRows(x))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.matrix(x, "log_softmax_rows")?;
        if n == 0 {
            return Err(Error::shape("log_softmax_rows", &[m, n], &[m, 1]));
        }
        let v = tensor::log_softmax_rows(self.value(x), n);
        self.push("log_softmax_rows", vec![m, n], v, &[x], Op::LogSoftmaxRows(x))
    }

    /// Row-wise inner products of two `m×n` matrices, as an `m×1` column.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.matrix(a, "row_dot")?;
        self.same_shape(a, b, "row_dot")?;
        let v = self
            .value(a)
            .chunks(n)
            .zip(self.value(b).chunks(n))
            .map(|(x, y)| tensor::dot(x, y))
            .collect();
        self.push("row_dot", vec![m, 1], v, &[a, b], Op::RowDot(a, b))
    }

    /// Row-wise log-sum-exp of an `m×n` matrix, as an `m×1` column.
    pub fn logsumexp_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.matrix(x, "logsumexp_rows")?;
        if n == 0 {
            return Err(Error::shape("logsumexp_rows", &[m, n], &[m, 1]));
        }
        let v = self.value(x).chunks(n).map(tensor::logsumexp).collect();
        self.push("logsumexp_rows", vec![m, 1], v, &[x], Op::LogSumExpRows(x))
    }

    /// Horizontal concatenation `[a | b]` of two matrices with equal row count.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, na) = self.matrix(a, "concat_cols")?;
        let (m2, nb) = self.matrix(b, "concat_cols")?;
        if m != m2 {
            return Err(Error::shape("concat_cols", self.shape(a), self.shape(b)));
        }
        let mut v = Vec::with_capacity(m * (na + nb));
        for i in 0..m {
            v.extend_from_slice(&self.value(a)[i * na..(i + 1) * na]);
            v.extend_from_slice(&self.value(b)[i * nb..(i + 1) * nb]);
        }
        self.push("concat_cols", vec![m, na + nb], v, &[a, b], Op::ConcatCols(a, b))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).iter().sum();
        self.push("sum", vec![], vec![v], &[x], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        let v = self.value(x).iter().sum::<f64>() / n as f64;
        self.push("mean", vec![], vec![v], &[x], Op::Mean(x))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::shape("backward", &root.shape, &[]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !root.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            self.propagate(node, &dy, &mut grads)?;
            grads[idx] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (rows_of(self.shape(*a)), cols_of(self.shape(*a)));
                let n = cols_of(self.shape(*b));
                if self.wants(*a) {
                    let da = tensor::mm_nt(dy, self.value(*b), m, n, k);
                    accumulate(&mut grads[a.0], &da);
                }
                if self.wants(*b) {
                    let db = tensor::mm_tn(self.value(*a), dy, m, k, n);
                    accumulate(&mut grads[b.0], &db);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (rows_of(self.shape(*a)), cols_of(self.shape(*a)));
                let n = rows_of(self.shape(*b));
                if self.wants(*a) {
                    let da = tensor::mm(dy, self.value(*b), m, n, k);
                    accumulate(&mut grads[a.0], &da);
                }
                if self.wants(*b) {
                    let db = tensor::mm_tn(dy, self.value(*a), m, n, k);
                    accumulate(&mut grads[b.0], &db);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], dy);
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], dy);
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], dy);
                }
                if self.wants(*b) {
                    let neg: Vec<f64> = dy.iter().map(|g| -g).collect();
                    accumulate(&mut grads[b.0], &neg);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let da: Vec<f64> = dy.iter().zip(self.value(*b)).map(|(g, y)| g * y).collect();
                    accumulate(&mut grads[a.0], &da);
                }
                if self.wants(*b) {
                    let db: Vec<f64> = dy.iter().zip(self.value(*a)).map(|(g, x)| g * x).collect();
                    accumulate(&mut grads[b.0], &db);
                }
            }
            Op::AddBias(x, bias) => {
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], dy);
                }
                if self.wants(*bias) {
                    let n = self.value(*bias).len();
                    let mut db = vec![0.0; n];
                    for row in dy.chunks(n) {
                        for (d, g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    accumulate(&mut grads[bias.0], &db);
                }
            }
            Op::Scale(x, c) => {
                let dx: Vec<f64> = dy.iter().map(|g| g * c).collect();
                accumulate(&mut grads[x.0], &dx);
            }
            Op::Relu(x) => {
                let dx: Vec<f64> = dy
                    .iter()
                    .zip(self.value(*x))
                    .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(&mut grads[x.0], &dx);
            }
            Op::Softplus(x) => {
                let dx: Vec<f64> = dy.iter().zip(self.value(*x)).map(|(g, v)| g * sigmoid(*v)).collect();
                accumulate(&mut grads[x.0], &dx);
            }
            Op::L2Normalize { x, divisors, eps } => {
                let n = cols_of(&node.shape);
                let y = &node.value;
                let mut dx = vec![0.0; y.len()];
                for (r, &d) in divisors.iter().enumerate() {
                    let span = r * n..(r + 1) * n;
                    let (yr, gr) = (&y[span.clone()], &dy[span.clone()]);
                    let out = &mut dx[span];
                    if d > *eps {
                        let proj = tensor::dot(yr, gr);
                        for ((o, g), yv) in out.iter_mut().zip(gr).zip(yr) {
                            *o = (g - yv * proj) / d;
                        }
                    } else {
                        for (o, g) in out.iter_mut().zip(gr) {
                            *o = g / eps;
                        }
                    }
                }
                accumulate(&mut grads[x.0], &dx);
            }
            Op::SoftmaxRows(x) => {
                let n = cols_of(&node.shape);
                let mut dx = Vec::with_capacity(dy.len());
                for (yr, gr) in node.value.chunks(n).zip(dy.chunks(n)) {
                    let s = tensor::dot(yr, gr);
                    dx.extend(yr.iter().zip(gr).map(|(y, g)| y * (g - s)));
                }
                accumulate(&mut grads[x.0], &dx);
            }
            Op::LogSoftmaxRows(x) => {
                let n = cols_of(&node.shape);
                let mut dx = Vec::with_capacity(dy.len());
                for (yr, gr) in node.value.chunks(n).zip(dy.chunks(n)) {
                    let s: f64 = gr.iter().sum();
                    dx.extend(yr.iter().zip(gr).map(|(y, g)| g - y.exp() * s));
                }
                accumulate(&mut grads[x.0], &dx);
            }
            Op::RowDot(a, b) => {
                let n = cols_of(self.shape(*a));
                let scale_rows = |other: &[f64]| -> Vec<f64> {
                    other
                        .chunks(n)
                        .zip(dy)
                        .flat_map(|(row, g)| row.iter().map(move |v| v * g))
                        .collect()
                };
                if self.wants(*a) {
                    let da = scale_rows(self.value(*b));
                    accumulate(&mut grads[a.0], &da);
                }
                if self.wants(*b) {
                    let db = scale_rows(self.value(*a));
                    accumulate(&mut grads[b.0], &db);
                }
            }
            Op::LogSumExpRows(x) => {
                let n = cols_of(self.shape(*x));
                let mut dx = Vec::with_capacity(n * dy.len());
                for ((row, lse), g) in self.value(*x).chunks(n).zip(&node.value).zip(dy) {
                    dx.extend(row.iter().map(|v| g * (v - lse).exp()));
                }
                accumulate(&mut grads[x.0], &dx);
            }
            Op::ConcatCols(a, b) => {
                let na = cols_of(self.shape(*a));
                let nb = cols_of(self.shape(*b));
                let rows = dy.chunks(na + nb);
                if self.wants(*a) {
                    let da: Vec<f64> = rows.clone().flat_map(|r| r[..na].iter().copied()).collect();
                    accumulate(&mut grads[a.0], &da);
                }
                if self.wants(*b) {
                    let db: Vec<f64> = rows.flat_map(|r| r[na..].iter().copied()).collect();
                    accumulate(&mut grads[b.0], &db);
                }
            }
            Op::Sum(x) => {
                let dx = vec![dy[0]; self.value(*x).len()];
                accumulate(&mut grads[x.0], &dx);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let dx = vec![dy[0] / n as f64; n];
                accumulate(&mut grads[x.0], &dx);
            }
        }
        Ok(())
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
