//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value. Node ids are
//! assigned in creation order, so inputs always precede their consumers and
//! a single reverse sweep visits nodes in topological order. Gradients of
//! nodes with several consumers accumulate additively.

use crate::tensor::{sigmoid_scalar, Result, Tensor, TensorError, LOG_FLOOR};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    Concat(Vec<Var>),
    CrossEntropy { pred: Var, truth: Tensor },
    Sum(Var),
    SumSquares(Var),
    Scale(Var, f64),
    Row { table: Var, row: usize },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
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

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Registers a leaf (parameter, input or constant).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), value))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        Ok(self.push(Op::Mul(a, b), value))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).sigmoid()?;
        Ok(self.push(Op::Sigmoid(a), value))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).tanh()?;
        Ok(self.push(Op::Tanh(a), value))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).softmax()?;
        Ok(self.push(Op::Softmax(a), value))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat(&values)?;
        Ok(self.push(Op::Concat(parts.to_vec()), value))
    }

    /// Cross-entropy of a predicted distribution against a fixed target.
    pub fn cross_entropy(&mut self, pred: Var, truth: &Tensor) -> Result<Var> {
        let value = Tensor::cross_entropy(self.value(pred), truth)?;
        Ok(self.push(
            Op::CrossEntropy {
                pred,
                truth: truth.clone(),
            },
            Tensor::scalar(value),
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).sum();
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: "sum" });
        }
        Ok(self.push(Op::Sum(a), Tensor::scalar(value)))
    }

    /// Squared Frobenius norm.
    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).sum_squares();
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: "sum_squares" });
        }
        Ok(self.push(Op::SumSquares(a), Tensor::scalar(value)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let value = self.value(a).scale(factor)?;
        Ok(self.push(Op::Scale(a, factor), value))
    }

    /// Selects one row of a matrix as a vector (embedding lookup).
    pub fn row(&mut self, table: Var, row: usize) -> Result<Var> {
        let t = self.value(table);
        if !t.is_matrix() || row >= t.shape()[0] {
            return Err(TensorError::Invalid(format!(
                "row {row} out of range for shape {:?}",
                t.shape()
            )));
        }
        let cols = t.shape()[1];
        let data = t.data()[row * cols..(row + 1) * cols].to_vec();
        Ok(self.push(Op::Row { table, row }, Tensor::from_parts(vec![cols], data)))
    }

    /// Sums a non-empty list left to right.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| TensorError::Invalid("sum of zero terms".into()))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    /// Propagates d(loss)/d(node) to every node recorded before `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(TensorError::NotScalar(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let (m, k) = (av.shape()[0], av.shape()[1]);
                    if bv.is_vector() {
                        {
                            let ga = slot(&mut grads, *a, av.len());
                            for i in 0..m {
                                let gi = g[i];
                                if gi == 0.0 {
                                    continue;
                                }
                                for (p, bp) in bv.data().iter().enumerate() {
                                    ga[i * k + p] += gi * bp;
                                }
                            }
                        }
                        let gb = slot(&mut grads, *b, bv.len());
                        for i in 0..m {
                            let gi = g[i];
                            let row = &av.data()[i * k..(i + 1) * k];
                            for (o, a_ip) in gb.iter_mut().zip(row) {
                                *o += a_ip * gi;
                            }
                        }
                    } else {
                        let n = bv.shape()[1];
                        {
                            // dA = G B^T
                            let ga = slot(&mut grads, *a, av.len());
                            for i in 0..m {
                                for p in 0..k {
                                    let mut acc = 0.0;
                                    for j in 0..n {
                                        acc += g[i * n + j] * bv.data()[p * n + j];
                                    }
                                    ga[i * k + p] += acc;
                                }
                            }
                        }
                        // dB = A^T G
                        let gb = slot(&mut grads, *b, bv.len());
                        for i in 0..m {
                            for p in 0..k {
                                let a_ip = av.data()[i * k + p];
                                for j in 0..n {
                                    gb[p * n + j] += a_ip * g[i * n + j];
                                }
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    add_into(slot(&mut grads, *a, g.len()), &g);
                    add_into(slot(&mut grads, *b, g.len()), &g);
                }
                Op::Mul(a, b) => {
                    let bv = self.value(*b).data();
                    let ga = slot(&mut grads, *a, g.len());
                    for ((o, gi), bi) in ga.iter_mut().zip(&g).zip(bv) {
                        *o += gi * bi;
                    }
                    let av = self.value(*a).data();
                    let gb = slot(&mut grads, *b, g.len());
                    for ((o, gi), ai) in gb.iter_mut().zip(&g).zip(av) {
                        *o += gi * ai;
                    }
                }
                Op::Sigmoid(a) => {
                    let y = node.value.data();
                    let ga = slot(&mut grads, *a, g.len());
                    for ((o, gi), yi) in ga.iter_mut().zip(&g).zip(y) {
                        *o += gi * yi * (1.0 - yi);
                    }
                }
                Op::Tanh(a) => {
                    let y = node.value.data();
                    let ga = slot(&mut grads, *a, g.len());
                    for ((o, gi), yi) in ga.iter_mut().zip(&g).zip(y) {
                        *o += gi * (1.0 - yi * yi);
                    }
                }
                Op::Softmax(a) => {
                    let y = node.value.data();
                    let dot: f64 = g.iter().zip(y).map(|(gi, yi)| gi * yi).sum();
                    let ga = slot(&mut grads, *a, g.len());
                    for ((o, gi), yi) in ga.iter_mut().zip(&g).zip(y) {
                        *o += yi * (gi - dot);
                    }
                }
                Op::Concat(parts) => {
                    let shape = node.value.shape();
                    if shape.len() == 1 {
                        let mut offset = 0;
                        for p in parts {
                            let len = self.value(*p).len();
                            add_into(slot(&mut grads, *p, len), &g[offset..offset + len]);
                            offset += len;
                        }
                    } else {
                        let (rows, cols) = (shape[0], shape[1]);
                        let mut col_offset = 0;
                        for p in parts {
                            let pc = self.value(*p).shape()[1];
                            let gp = slot(&mut grads, *p, rows * pc);
                            for r in 0..rows {
                                let src = &g[r * cols + col_offset..r * cols + col_offset + pc];
                                add_into(&mut gp[r * pc..(r + 1) * pc], src);
                            }
                            col_offset += pc;
                        }
                    }
                }
                Op::CrossEntropy { pred, truth } => {
                    let pv = self.value(*pred).data();
                    let gp = slot(&mut grads, *pred, pv.len());
                    for ((o, &p), &t) in gp.iter_mut().zip(pv).zip(truth.data()) {
                        if t != 0.0 && p >= LOG_FLOOR {
                            *o += -g[0] * t / p;
                        }
                    }
                }
                Op::Sum(a) => {
                    let len = self.value(*a).len();
                    for o in slot(&mut grads, *a, len) {
                        *o += g[0];
                    }
                }
                Op::SumSquares(a) => {
                    let av = self.value(*a).data();
                    let ga = slot(&mut grads, *a, av.len());
                    for (o, x) in ga.iter_mut().zip(av) {
                        *o += 2.0 * x * g[0];
                    }
                }
                Op::Scale(a, factor) => {
                    let ga = slot(&mut grads, *a, g.len());
                    for (o, gi) in ga.iter_mut().zip(&g) {
                        *o += gi * factor;
                    }
                }
                Op::Row { table, row } => {
                    let tv = self.value(*table);
                    let cols = tv.shape()[1];
                    let gt = slot(&mut grads, *table, tv.len());
                    add_into(&mut gt[row * cols..(row + 1) * cols], &g);
                }
            }
            grads[id] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| g.map(|data| Tensor::from_parts(node.value.shape().to_vec(), data)))
            .collect();
        Ok(Gradients { grads })
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of `v`, or `None` when `v` is not an ancestor of the loss.
    pub fn try_get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`; nodes unreachable from the loss get zeros.
    pub fn get(&self, tape: &Tape, v: Var) -> Tensor {
        self.try_get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }
}

/// Central-difference gradient of a scalar function.
///
/// Each coordinate is `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn finite_diff_grad<E>(
    mut f: impl FnMut(&Tensor) -> std::result::Result<f64, E>,
    x: &Tensor,
    h: f64,
) -> std::result::Result<Tensor, E> {
    assert!(h > 0.0, "finite difference step must be positive");
    let mut probe = x.clone();
    let mut out = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        out[i] = (plus - minus) / (2.0 * h);
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Relative error with the `max(|a|, |b|, 1e-8)` denominator used by the
/// gradient checks.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Sigmoid derivative at a point, exposed for tests of gate code.
pub fn sigmoid_prime(x: f64) -> f64 {
    let s = sigmoid_scalar(x);
    s * (1.0 - s)
}
