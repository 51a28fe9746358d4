//! Dense row-major tensors of `f64`.

use serde::{Deserialize, Serialize};

use super::EngineError;

/// A dense tensor. The shape of a scalar is `[]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Builds a tensor, rejecting inconsistent shapes and non-finite entries.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, EngineError> {
        if numel(&shape) != data.len() {
            return Err(EngineError::ShapeMismatch {
                op: "tensor",
                detail: format!("shape {:?} needs {} values, got {}", shape, numel(&shape), data.len()),
            });
        }
        let t = Tensor { shape, data };
        t.check_finite("tensor")?;
        Ok(t)
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor { shape, data }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel(shape)] }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![v; numel(shape)] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    /// Row-major matrix from nested rows.
    pub fn matrix(rows: &[Vec<f64>]) -> Result<Self, EngineError> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(EngineError::ShapeMismatch { op: "matrix", detail: "ragged rows".into() });
        }
        Tensor::new(vec![r, c], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
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
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            self.shape.first().copied().unwrap_or(1)
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn check_finite(&self, op: &'static str) -> Result<(), EngineError> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(EngineError::NonFinite { op })
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor, EngineError> {
        if numel(shape) != self.len() {
            return Err(EngineError::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {:?}", self.shape, shape),
            });
        }
        Ok(Tensor::from_parts(shape.to_vec(), self.data.clone()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, EngineError> {
        if self.shape != other.shape {
            return Err(EngineError::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.shape, other.shape),
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn require_matrix(&self, op: &'static str) -> Result<(usize, usize), EngineError> {
        if self.shape.len() != 2 {
            return Err(EngineError::ShapeMismatch { op, detail: format!("expected a matrix, got {:?}", self.shape) });
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, EngineError> {
        let (m, k) = self.require_matrix("matmul")?;
        let (k2, n) = other.require_matrix("matmul")?;
        if k != k2 {
            return Err(EngineError::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} x {:?}", self.shape, other.shape),
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * n..(p + 1) * n];
                for (o, &b) in row.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor::from_parts(vec![m, n], out))
    }

    pub fn transpose(&self) -> Result<Tensor, EngineError> {
        let (m, n) = self.require_matrix("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor::from_parts(vec![n, m], out))
    }

    /// Matrix-vector product `W v` for `W: [m, n]`, `v: [n]`.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>, EngineError> {
        let (m, n) = self.require_matrix("matvec")?;
        if v.len() != n {
            return Err(EngineError::ShapeMismatch { op: "matvec", detail: format!("{:?} x [{}]", self.shape, v.len()) });
        }
        Ok((0..m).map(|i| self.data[i * n..(i + 1) * n].iter().zip(v).map(|(a, b)| a * b).sum()).collect())
    }

    /// Transposed matrix-vector product `Wᵀ u` for `W: [m, n]`, `u: [m]`.
    pub fn tmatvec(&self, u: &[f64]) -> Result<Vec<f64>, EngineError> {
        let (m, n) = self.require_matrix("tmatvec")?;
        if u.len() != m {
            return Err(EngineError::ShapeMismatch { op: "tmatvec", detail: format!("{:?}ᵀ x [{}]", self.shape, u.len()) });
        }
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, &w) in out.iter_mut().zip(&self.data[i * n..(i + 1) * n]) {
                *o += w * u[i];
            }
        }
        Ok(out)
    }

    /// Stacks equally shaped tensors into a `[k, ...]` batch.
    pub fn stack(items: &[&Tensor]) -> Result<Tensor, EngineError> {
        let first = items.first().ok_or_else(|| EngineError::ShapeMismatch { op: "stack", detail: "empty".into() })?;
        let mut data = Vec::with_capacity(items.len() * first.len());
        for t in items {
            if t.shape != first.shape {
                return Err(EngineError::ShapeMismatch {
                    op: "stack",
                    detail: format!("{:?} vs {:?}", first.shape, t.shape),
                });
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor::from_parts(shape, data))
    }

    /// Concatenates `[n_i, d]` matrices along rows.
    pub fn concat_rows(items: &[&Tensor]) -> Result<Tensor, EngineError> {
        let first = items.first().ok_or_else(|| EngineError::ShapeMismatch { op: "concat_rows", detail: "empty".into() })?;
        let cols = first.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for t in items {
            if t.shape.len() != 2 || t.cols() != cols {
                return Err(EngineError::ShapeMismatch { op: "concat_rows", detail: format!("{:?} vs {:?}", first.shape, t.shape) });
            }
            rows += t.rows();
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor::from_parts(vec![rows, cols], data))
    }

    /// Selects rows of a `[n, ...]` tensor.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        if shape.is_empty() {
            shape.push(idx.len());
        } else {
            shape[0] = idx.len();
        }
        Tensor::from_parts(shape, data)
    }
}
