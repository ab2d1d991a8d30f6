//! Dense `f64` tensors and a tape that differentiates through them.
//!
//! Tensors are rank 0, 1 or 2. Rank-1 tensors behave as a single row where a
//! matrix is expected. All model math in this crate is expressed as [`Graph`]
//! operations so that a single call to [`Graph::backward`] yields gradients
//! for every parameter leaf.

mod gradcheck;
mod graph;

pub use gradcheck::{grad_check, grad_check_many};
pub use graph::{Graph, KlTerm, Var};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pre-softmax value used for masked-out gate entries.
///
/// `exp(-1e9 - max)` is exactly zero in double precision, so masked entries
/// receive zero weight without introducing non-finite values.
pub const MASK_SENTINEL: f64 = -1e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.len() > 2 {
            return Err(Error::Contract(format!(
                "tensors are at most rank 2, got shape {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Builds a matrix from row slices; all rows must have the same length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::dim("from_rows", &[cols], &[r.len()]));
            }
            data.extend_from_slice(r);
        }
        Tensor::matrix(rows.len(), cols, data)
    }

    /// Glorot-style uniform initialisation in `(-a, a)`, `a = sqrt(6 / (fan_in + fan_out))`.
    pub fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        Self::uniform(&[rows, cols], a, rng)
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], a: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-a..a)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
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
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// The single value of a scalar-shaped tensor.
    pub fn item(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::Contract(format!(
                "expected a scalar, got shape {:?}",
                self.shape
            )))
        }
    }

    /// Row count when viewed as a matrix.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    /// Column count when viewed as a matrix.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Matrix product of `a` (p×q) and `b` (q×r).
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (p, q) = (a.rows(), a.cols());
    let (q2, r) = (b.rows(), b.cols());
    if q != q2 || a.shape.len() != 2 || b.shape.len() != 2 {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; p * r];
    gemm_acc(&a.data, &b.data, p, q, r, &mut out);
    Tensor::matrix(p, r, out)
}

/// `out += a·b` for row-major `a` (p×q), `b` (q×r), `out` (p×r). Rows of
/// `a` are taken four at a time so each row of `b` is loaded once per block.
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], p: usize, q: usize, r: usize, out: &mut [f64]) {
    debug_assert!(a.len() == p * q && b.len() == q * r && out.len() == p * r);
    let mut i = 0;
    while i + 4 <= p {
        let (o0, rest) = out[i * r..(i + 4) * r].split_at_mut(r);
        let (o1, rest) = rest.split_at_mut(r);
        let (o2, o3) = rest.split_at_mut(r);
        for k in 0..q {
            let (a0, a1, a2, a3) = (a[i * q + k], a[(i + 1) * q + k], a[(i + 2) * q + k], a[(i + 3) * q + k]);
            if a0 == 0.0 && a1 == 0.0 && a2 == 0.0 && a3 == 0.0 {
                continue;
            }
            let brow = &b[k * r..(k + 1) * r];
            for j in 0..r {
                let bv = brow[j];
                o0[j] += a0 * bv;
                o1[j] += a1 * bv;
                o2[j] += a2 * bv;
                o3[j] += a3 * bv;
            }
        }
        i += 4;
    }
    for i in i..p {
        let orow = &mut out[i * r..(i + 1) * r];
        for k in 0..q {
            let aik = a[i * q + k];
            if aik == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[k * r..(k + 1) * r]) {
                *o += aik * bv;
            }
        }
    }
}

/// Transpose of a row-major rows×cols buffer.
pub(crate) fn transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = data[i * cols + j];
        }
    }
    out
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(a: &Tensor) -> Result<Tensor> {
    if a.is_empty() {
        return Err(Error::Contract("softmax of an empty tensor".into()));
    }
    let cols = a.cols();
    let mut out = a.data.clone();
    for row in out.chunks_mut(cols) {
        softmax_in_place(row);
    }
    Tensor::new(a.shape.clone(), out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Elementwise logistic function, stable for large negative inputs.
pub fn sigmoid(a: &Tensor) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().map(|&x| sigmoid_scalar(x)).collect(),
    }
}

/// Concatenates along `axis`. Rank-1 tensors concatenate along axis 0.
pub fn concat(tensors: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = tensors
        .first()
        .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
    let rank = first.shape.len();
    for t in tensors {
        if t.shape.len() != rank {
            return Err(Error::dim("concat", first.shape(), t.shape()));
        }
    }
    match (rank, axis) {
        (1, 0) => {
            let data: Vec<f64> = tensors.iter().flat_map(|t| t.data.iter().copied()).collect();
            Ok(Tensor::vector(data))
        }
        (2, 0) => {
            let cols = first.shape[1];
            let mut rows = 0;
            let mut data = Vec::new();
            for t in tensors {
                if t.shape[1] != cols {
                    return Err(Error::dim("concat", first.shape(), t.shape()));
                }
                rows += t.shape[0];
                data.extend_from_slice(&t.data);
            }
            Tensor::matrix(rows, cols, data)
        }
        (2, 1) => {
            let rows = first.shape[0];
            let mut cols = 0;
            for t in tensors {
                if t.shape[0] != rows {
                    return Err(Error::dim("concat", first.shape(), t.shape()));
                }
                cols += t.shape[1];
            }
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for t in tensors {
                    data.extend_from_slice(t.row(r));
                }
            }
            Tensor::matrix(rows, cols, data)
        }
        _ => Err(Error::Contract(format!(
            "concat axis {axis} invalid for rank {rank}"
        ))),
    }
}
