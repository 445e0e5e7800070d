//! Tape-based reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Graph`] records every forward op as an append-only tape of nodes in
//! topological order. [`Graph::backward`] replays the tape in reverse,
//! accumulating gradients into per-node buffers. Parameters live outside the
//! graph in [`ParamBlock`]s and are bound as leaf nodes at the start of each
//! forward pass, so one training iteration uses one short-lived graph.
//!
//! The primitive set is intentionally small: matmul, add (with row
//! broadcast), sub, elementwise mul, negate, scale, relu, row-wise softmax,
//! log, clamp-min, abs, mean, and sum. That is enough to express every loss
//! in the training procedure.

use crate::{Error, Result};

/// Dense row-major matrix, the host-side value type fed into graphs.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// New matrix made of the given rows, in order.
    pub fn gather_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self::new(idx.len(), self.cols, data)
    }
}

/// Handle to a node in the active [`Graph`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Tensor(pub(crate) usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Matmul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Negate(usize),
    Scale(usize, f64),
    Relu(usize),
    SoftmaxRows(usize),
    Log(usize),
    ClampMin(usize, f64),
    Abs(usize),
    Mean(usize),
    Sum(usize),
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Vec<f64>,
    requires_grad: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Append-only computation tape. Owned by one forward/backward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> Tensor {
        debug_assert_eq!(numel(&shape), values.len());
        let n = values.len();
        self.nodes.push(Node {
            op,
            shape,
            values,
            grad: vec![0.0; n],
            requires_grad,
        });
        Tensor(self.nodes.len() - 1)
    }

    /// Leaf node that does not take gradients.
    pub fn constant(&mut self, shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        if numel(shape) != values.len() {
            return Err(Error::ShapeContract {
                op: "constant",
                expected: format!("{} values", numel(shape)),
                got: shape.to_vec(),
            });
        }
        Ok(self.push(Op::Leaf, shape.to_vec(), values, false))
    }

    /// Leaf node that accumulates a gradient during backward.
    pub fn variable(&mut self, shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        if numel(shape) != values.len() {
            return Err(Error::ShapeContract {
                op: "variable",
                expected: format!("{} values", numel(shape)),
                got: shape.to_vec(),
            });
        }
        Ok(self.push(Op::Leaf, shape.to_vec(), values, true))
    }

    pub fn input_matrix(&mut self, m: &Matrix) -> Tensor {
        self.push(Op::Leaf, vec![m.rows, m.cols], m.data.clone(), false)
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.nodes[t.0].shape
    }

    pub fn values(&self, t: Tensor) -> &[f64] {
        &self.nodes[t.0].values
    }

    pub fn grad(&self, t: Tensor) -> &[f64] {
        &self.nodes[t.0].grad
    }

    pub fn scalar_value(&self, t: Tensor) -> f64 {
        debug_assert_eq!(self.nodes[t.0].values.len(), 1);
        self.nodes[t.0].values[0]
    }

    fn requires(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        {
            let av = self.values(a);
            let bv = self.values(b);
            for i in 0..m {
                for p in 0..k {
                    let x = av[i * k + p];
                    if x == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        out[i * n + j] += x * bv[p * n + j];
                    }
                }
            }
        }
        let rg = self.requires(&[a.0, b.0]);
        Ok(self.push(Op::Matmul(a.0, b.0), vec![m, n], out, rg))
    }

    /// Elementwise add. The right operand may also be a single row `[1, c]`
    /// broadcast across the rows of a `[r, c]` left operand (bias add).
    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.add_sub(a, b, false)
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.add_sub(a, b, true)
    }

    fn add_sub(&mut self, a: Tensor, b: Tensor, neg: bool) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let broadcast = sa != sb;
        if broadcast && !(sa.len() == 2 && sb.len() == 2 && sb[0] == 1 && sb[1] == sa[1]) {
            return Err(Error::ShapeMismatch {
                op: if neg { "sub" } else { "add" },
                lhs: sa,
                rhs: sb,
            });
        }
        let bv = self.values(b).to_vec();
        let av = self.values(a);
        let out: Vec<f64> = if broadcast {
            let c = sa[1];
            av.iter()
                .enumerate()
                .map(|(i, &x)| if neg { x - bv[i % c] } else { x + bv[i % c] })
                .collect()
        } else {
            av.iter()
                .zip(&bv)
                .map(|(&x, &y)| if neg { x - y } else { x + y })
                .collect()
        };
        let rg = self.requires(&[a.0, b.0]);
        let op = if neg { Op::Sub(a.0, b.0) } else { Op::Add(a.0, b.0) };
        Ok(self.push(op, sa, out, rg))
    }

    /// Elementwise (Hadamard) product; shapes must match exactly.
    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: sa,
                rhs: sb,
            });
        }
        let bv = self.values(b).to_vec();
        let out: Vec<f64> = self.values(a).iter().zip(&bv).map(|(&x, &y)| x * y).collect();
        let rg = self.requires(&[a.0, b.0]);
        Ok(self.push(Op::Mul(a.0, b.0), sa, out, rg))
    }

    pub fn negate(&mut self, a: Tensor) -> Result<Tensor> {
        let out: Vec<f64> = self.values(a).iter().map(|&x| -x).collect();
        let (s, rg) = (self.shape(a).to_vec(), self.requires(&[a.0]));
        Ok(self.push(Op::Negate(a.0), s, out, rg))
    }

    pub fn scale(&mut self, a: Tensor, c: f64) -> Result<Tensor> {
        let out: Vec<f64> = self.values(a).iter().map(|&x| c * x).collect();
        let (s, rg) = (self.shape(a).to_vec(), self.requires(&[a.0]));
        Ok(self.push(Op::Scale(a.0, c), s, out, rg))
    }

    pub fn relu(&mut self, a: Tensor) -> Result<Tensor> {
        let out: Vec<f64> = self.values(a).iter().map(|&x| x.max(0.0)).collect();
        let (s, rg) = (self.shape(a).to_vec(), self.requires(&[a.0]));
        Ok(self.push(Op::Relu(a.0), s, out, rg))
    }

    /// Row-wise softmax with max-subtraction for numerical stability.
    pub fn softmax_rows(&mut self, a: Tensor) -> Result<Tensor> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::ShapeContract {
                op: "softmax-rows",
                expected: "rank-2 tensor".into(),
                got: s,
            });
        }
        let (r, c) = (s[0], s[1]);
        let mut out = vec![0.0; r * c];
        {
            let av = self.values(a);
            for i in 0..r {
                let row = &av[i * c..(i + 1) * c];
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..c {
                    let e = (row[j] - mx).exp();
                    out[i * c + j] = e;
                    z += e;
                }
                for j in 0..c {
                    out[i * c + j] /= z;
                }
            }
        }
        let rg = self.requires(&[a.0]);
        Ok(self.push(Op::SoftmaxRows(a.0), s, out, rg))
    }

    /// Natural log; every input value must be strictly positive.
    pub fn log(&mut self, a: Tensor) -> Result<Tensor> {
        if let Some(&bad) = self.values(a).iter().find(|&&x| x <= 0.0) {
            return Err(Error::LogDomain { value: bad });
        }
        let out: Vec<f64> = self.values(a).iter().map(|&x| x.ln()).collect();
        let (s, rg) = (self.shape(a).to_vec(), self.requires(&[a.0]));
        Ok(self.push(Op::Log(a.0), s, out, rg))
    }

    /// `max(x, min)` elementwise; gradient passes only where `x > min`.
    pub fn clamp_min(&mut self, a: Tensor, min: f64) -> Result<Tensor> {
        let out: Vec<f64> = self.values(a).iter().map(|&x| x.max(min)).collect();
        let (s, rg) = (self.shape(a).to_vec(), self.requires(&[a.0]));
        Ok(self.push(Op::ClampMin(a.0, min), s, out, rg))
    }

    /// Elementwise absolute value. The subgradient at 0 is defined as 0.
    pub fn abs(&mut self, a: Tensor) -> Result<Tensor> {
        let out: Vec<f64> = self.values(a).iter().map(|&x| x.abs()).collect();
        let (s, rg) = (self.shape(a).to_vec(), self.requires(&[a.0]));
        Ok(self.push(Op::Abs(a.0), s, out, rg))
    }

    /// Mean over all elements, producing a scalar of shape `[1]`.
    pub fn mean(&mut self, a: Tensor) -> Result<Tensor> {
        let v = self.values(a);
        let out = vec![v.iter().sum::<f64>() / v.len() as f64];
        let rg = self.requires(&[a.0]);
        Ok(self.push(Op::Mean(a.0), vec![1], out, rg))
    }

    /// Sum over all elements, producing a scalar of shape `[1]`.
    pub fn sum(&mut self, a: Tensor) -> Result<Tensor> {
        let out = vec![self.values(a).iter().sum::<f64>()];
        let rg = self.requires(&[a.0]);
        Ok(self.push(Op::Sum(a.0), vec![1], out, rg))
    }

    /// Distance of the closest abs() input to its kink at 0, if the graph
    /// contains any abs nodes. Used by gradient checks to exclude instances
    /// where finite differences straddle the kink.
    pub fn abs_kink_distance(&self) -> Option<f64> {
        let mut min: Option<f64> = None;
        for node in &self.nodes {
            if let Op::Abs(a) = node.op {
                for &x in &self.nodes[a].values {
                    let d = x.abs();
                    min = Some(min.map_or(d, |m: f64| m.min(d)));
                }
            }
        }
        min
    }

    /// Reverse pass from a scalar loss. Gradients of all reachable
    /// gradient-taking leaves are accumulated; everything else stays zero.
    pub fn backward(&mut self, loss: Tensor) -> Result<()> {
        if self.nodes[loss.0].values.len() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        for node in &mut self.nodes {
            for g in &mut node.grad {
                *g = 0.0;
            }
        }
        self.nodes[loss.0].grad[0] = 1.0;

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let go = self.nodes[i].grad.clone();
            if go.iter().all(|&g| g == 0.0) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    let (m, k) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                    let n = self.nodes[b].shape[1];
                    let av = self.nodes[a].values.clone();
                    let bv = self.nodes[b].values.clone();
                    // dA = dC * B^T
                    for r in 0..m {
                        for c in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += go[r * n + j] * bv[c * n + j];
                            }
                            self.nodes[a].grad[r * k + c] += acc;
                        }
                    }
                    // dB = A^T * dC
                    for r in 0..k {
                        for c in 0..n {
                            let mut acc = 0.0;
                            for s in 0..m {
                                acc += av[s * k + r] * go[s * n + c];
                            }
                            self.nodes[b].grad[r * n + c] += acc;
                        }
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(op, Op::Sub(_, _)) { -1.0 } else { 1.0 };
                    for (g, &d) in self.nodes[a].grad.iter_mut().zip(&go) {
                        *g += d;
                    }
                    let broadcast = self.nodes[b].values.len() != go.len();
                    if broadcast {
                        let c = self.nodes[b].shape[1];
                        for (j, &d) in go.iter().enumerate() {
                            self.nodes[b].grad[j % c] += sign * d;
                        }
                    } else {
                        for (g, &d) in self.nodes[b].grad.iter_mut().zip(&go) {
                            *g += sign * d;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let av = self.nodes[a].values.clone();
                    let bv = self.nodes[b].values.clone();
                    for (j, &d) in go.iter().enumerate() {
                        self.nodes[a].grad[j] += d * bv[j];
                        self.nodes[b].grad[j] += d * av[j];
                    }
                }
                Op::Negate(a) => {
                    for (g, &d) in self.nodes[a].grad.iter_mut().zip(&go) {
                        *g -= d;
                    }
                }
                Op::Scale(a, c) => {
                    for (g, &d) in self.nodes[a].grad.iter_mut().zip(&go) {
                        *g += c * d;
                    }
                }
                Op::Relu(a) => {
                    let av = self.nodes[a].values.clone();
                    for (j, &d) in go.iter().enumerate() {
                        if av[j] > 0.0 {
                            self.nodes[a].grad[j] += d;
                        }
                    }
                }
                Op::SoftmaxRows(a) => {
                    let y = self.nodes[i].values.clone();
                    let c = self.nodes[i].shape[1];
                    let r = self.nodes[i].shape[0];
                    for row in 0..r {
                        let yr = &y[row * c..(row + 1) * c];
                        let gr = &go[row * c..(row + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(&v, &d)| v * d).sum();
                        for j in 0..c {
                            self.nodes[a].grad[row * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
                Op::Log(a) => {
                    let av = self.nodes[a].values.clone();
                    for (j, &d) in go.iter().enumerate() {
                        self.nodes[a].grad[j] += d / av[j];
                    }
                }
                Op::ClampMin(a, min) => {
                    let av = self.nodes[a].values.clone();
                    for (j, &d) in go.iter().enumerate() {
                        if av[j] > min {
                            self.nodes[a].grad[j] += d;
                        }
                    }
                }
                Op::Abs(a) => {
                    let av = self.nodes[a].values.clone();
                    for (j, &d) in go.iter().enumerate() {
                        self.nodes[a].grad[j] += d * if av[j] > 0.0 {
                            1.0
                        } else if av[j] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                    }
                }
                Op::Mean(a) => {
                    let n = self.nodes[a].values.len() as f64;
                    for g in self.nodes[a].grad.iter_mut() {
                        *g += go[0] / n;
                    }
                }
                Op::Sum(a) => {
                    for g in self.nodes[a].grad.iter_mut() {
                        *g += go[0];
                    }
                }
            }
        }
        Ok(())
    }
}

/// One parameter tensor: shape plus row-major values.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl ParamTensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Self {
        assert_eq!(numel(&shape), values.len());
        Self { shape, values }
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }
}

/// Named group of parameter tensors whose `trainable` flag can be toggled
/// per training step. Flipping the flag never changes values; it only
/// controls whether [`ParamBlock::sgd_step`] applies updates.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub tensors: Vec<ParamTensor>,
    pub trainable: bool,
}

impl ParamBlock {
    pub fn new(name: impl Into<String>, tensors: Vec<ParamTensor>) -> Self {
        Self {
            name: name.into(),
            tensors,
            trainable: true,
        }
    }

    /// Insert every tensor as a gradient-taking leaf. Gradients still flow
    /// through frozen blocks during backward (a frozen head must pass its
    /// gradient down to the extractor); freezing only skips the update.
    pub fn bind(&self, g: &mut Graph) -> Vec<Tensor> {
        self.tensors
            .iter()
            .map(|t| {
                g.variable(&t.shape, t.values.clone())
                    .expect("param tensor is internally consistent")
            })
            .collect()
    }

    /// `value <- value - lr * grad` for each tensor, if trainable.
    pub fn sgd_step(&mut self, g: &Graph, binding: &[Tensor], lr: f64) -> Result<()> {
        if lr < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be nonnegative, got {lr}"
            )));
        }
        if binding.len() != self.tensors.len() {
            return Err(Error::Contract(format!(
                "binding for block '{}' has {} tensors, expected {}",
                self.name,
                binding.len(),
                self.tensors.len()
            )));
        }
        if !self.trainable {
            return Ok(());
        }
        for (t, &node) in self.tensors.iter_mut().zip(binding) {
            let grad = g.grad(node);
            if grad.len() != t.values.len() {
                return Err(Error::Contract(format!(
                    "gradient length {} does not match tensor of {} values in block '{}'",
                    grad.len(),
                    t.values.len(),
                    self.name
                )));
            }
            for (v, &d) in t.values.iter_mut().zip(grad) {
                *v -= lr * d;
            }
        }
        Ok(())
    }
}
