//! Dense row-major `f64` tensors.
//!
//! Only the shapes the recurrent architecture needs are supported: scalars
//! (shape `[]`), vectors (`[n]`) and matrices (`[m, n]`). There is no
//! broadcasting apart from the matrix-vector product.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Probabilities below this floor are clamped before taking a logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("invalid tensor: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}{:?}", self.shape, self.data)
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

/// Logistic sigmoid that never evaluates `exp` of a large positive argument.
#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.len() > 2 {
            return Err(TensorError::Invalid(format!(
                "rank {} not supported",
                shape.len()
            )));
        }
        if shape.contains(&0) {
            return Err(TensorError::Invalid(format!(
                "zero-sized dimension in {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::Invalid(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        check_finite("new", &data)?;
        Ok(Self { shape, data })
    }

    /// Builds a tensor from values already known to be consistent.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(Vec::new(), vec![value])
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![0.0; len])
    }

    pub fn ones(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![1.0; len])
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn one_hot(classes: usize, index: usize) -> Result<Self> {
        if index >= classes {
            return Err(TensorError::Invalid(format!(
                "class index {index} out of range for {classes} classes"
            )));
        }
        let mut t = Self::zeros(&[classes]);
        t.data[index] = 1.0;
        Ok(t)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn is_vector(&self) -> bool {
        self.shape.len() == 1
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn to_scalar(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(TensorError::NotScalar(self.shape.clone()))
        }
    }

    /// Element `(row, col)` of a matrix.
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.shape[1] + col]
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    fn ensure_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(TensorError::Shape {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            })
        }
    }

    /// Matrix product `[m,k] x [k,n]`, or matrix-vector product `[m,k] x [k]`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let mismatch = || TensorError::Shape {
            op: "matmul",
            lhs: self.shape.clone(),
            rhs: rhs.shape.clone(),
        };
        if !self.is_matrix() {
            return Err(mismatch());
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let out = match rhs.shape.as_slice() {
            [kk] if *kk == k => {
                let data = (0..m)
                    .map(|i| {
                        let row = &self.data[i * k..(i + 1) * k];
                        row.iter().zip(&rhs.data).map(|(a, b)| a * b).sum()
                    })
                    .collect();
                Tensor::from_parts(vec![m], data)
            }
            [kk, n] if *kk == k => {
                let n = *n;
                let mut data = vec![0.0; m * n];
                for i in 0..m {
                    let out_row = &mut data[i * n..(i + 1) * n];
                    for p in 0..k {
                        let a = self.data[i * k + p];
                        let rhs_row = &rhs.data[p * n..(p + 1) * n];
                        for (o, b) in out_row.iter_mut().zip(rhs_row) {
                            *o += a * b;
                        }
                    }
                }
                Tensor::from_parts(vec![m, n], data)
            }
            _ => return Err(mismatch()),
        };
        check_finite("matmul", &out.data)?;
        Ok(out)
    }

    fn zip_with(&self, rhs: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.ensure_same_shape(rhs, op)?;
        let data: Vec<f64> = self.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)).collect();
        check_finite(op, &data)?;
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    fn map(&self, op: &'static str, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let data: Vec<f64> = self.data.iter().map(|&v| f(v)).collect();
        check_finite(op, &data)?;
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_with(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_with(rhs, "sub", |a, b| a - b)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_with(rhs, "mul", |a, b| a * b)
    }

    pub fn scale(&self, factor: f64) -> Result<Tensor> {
        self.map("scale", |v| v * factor)
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        self.map("sigmoid", sigmoid_scalar)
    }

    pub fn tanh(&self) -> Result<Tensor> {
        self.map("tanh", f64::tanh)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Softmax of a vector, computed after subtracting the maximum logit.
    pub fn softmax(&self) -> Result<Tensor> {
        if !self.is_vector() || self.len() < 2 {
            return Err(TensorError::Invalid(format!(
                "softmax needs a vector of at least 2 logits, got shape {:?}",
                self.shape
            )));
        }
        let max = self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = self.data.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let data: Vec<f64> = exps.into_iter().map(|e| e / total).collect();
        check_finite("softmax", &data)?;
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    /// Concatenation along the last axis. Matrices must agree on row count.
    pub fn concat(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of zero tensors".into()))?;
        for p in &parts[1..] {
            let compatible = match (first.shape.as_slice(), p.shape.as_slice()) {
                ([_], [_]) => true,
                ([r1, _], [r2, _]) => r1 == r2,
                _ => false,
            };
            if !compatible {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
        }
        match first.shape.as_slice() {
            [_] => {
                let data: Vec<f64> = parts.iter().flat_map(|p| p.data.iter().copied()).collect();
                Ok(Tensor::from_parts(vec![data.len()], data))
            }
            [rows, _] => {
                let rows = *rows;
                let cols: usize = parts.iter().map(|p| p.shape[1]).sum();
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for p in parts {
                        let c = p.shape[1];
                        data.extend_from_slice(&p.data[r * c..(r + 1) * c]);
                    }
                }
                Ok(Tensor::from_parts(vec![rows, cols], data))
            }
            _ => Err(TensorError::Invalid("concat of scalars".into())),
        }
    }

    /// `-sum_j truth_j * ln(max(pred_j, 1e-12))`.
    pub fn cross_entropy(pred: &Tensor, truth: &Tensor) -> Result<f64> {
        pred.ensure_same_shape(truth, "cross_entropy")?;
        let value: f64 = pred
            .data
            .iter()
            .zip(&truth.data)
            .filter(|(_, &t)| t != 0.0)
            .map(|(&p, &t)| -t * p.max(LOG_FLOOR).ln())
            .sum();
        check_finite("cross_entropy", &[value])?;
        Ok(value)
    }

    /// Index of the largest entry; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if !self.is_matrix() {
            return Err(TensorError::Invalid("transpose of a non-matrix".into()));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor::from_parts(vec![n, m], data))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.ensure_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
