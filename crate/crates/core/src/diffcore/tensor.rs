use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major float64 matrix.
///
/// Every tensor is two-dimensional; a scalar is `[1, 1]` and a vector is a
/// single row `[1, n]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: [usize; 2],
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidTensor(format!(
                "dimensions must be positive, got [{rows}, {cols}]"
            )));
        }
        if rows * cols != data.len() {
            return Err(Error::InvalidTensor(format!(
                "shape [{rows}, {cols}] needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self {
            shape: [rows, cols],
            data,
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::full(rows, cols, 0.0)
    }

    pub fn full(rows: usize, cols: usize, value: f64) -> Self {
        assert!(rows > 0 && cols > 0, "tensor dimensions must be positive");
        Self {
            shape: [rows, cols],
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: [1, 1],
            data: vec![value],
        }
    }

    /// Single-row tensor holding `values`.
    pub fn row(values: Vec<f64>) -> Self {
        assert!(!values.is_empty(), "row tensor must not be empty");
        Self {
            shape: [1, values.len()],
            data: values,
        }
    }

    pub fn shape(&self) -> [usize; 2] {
        self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape == [1, 1]
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        let cols = self.shape[1];
        self.data[r * cols + c] = value;
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn row_slice_mut(&mut self, r: usize) -> &mut [f64] {
        let cols = self.shape[1];
        &mut self.data[r * cols..(r + 1) * cols]
    }

    /// Value of a `[1, 1]` tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `a [n, k] x b [k, m]`.
pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor {
        shape: [n, m],
        data: out,
    }
}

/// `a [n, k] x b^T` where `b` is `[m, k]`.
pub(crate) fn matmul_transpose_b(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k, m) = (a.rows(), a.cols(), b.rows());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b.data[j * k..(j + 1) * k];
            out[i * m + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Tensor {
        shape: [n, m],
        data: out,
    }
}

/// `a^T x b` where `a` is `[n, k]` and `b` is `[n, m]`.
pub(crate) fn matmul_transpose_a(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        let arow = &a.data[i * k..(i + 1) * k];
        let brow = &b.data[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor {
        shape: [k, m],
        data: out,
    }
}

/// Numerically stable row-wise log-softmax.
pub fn log_softmax_rows(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_slice_mut(r);
        let (arg, max) = row
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |b, (i, v)| if v > b.1 { (i, v) } else { b });
        // ln1p keeps log p of a near-certain class accurate to relative precision
        let rest: f64 = row
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != arg)
            .map(|(_, v)| (v - max).exp())
            .sum();
        let tail = rest.ln_1p();
        for v in row.iter_mut() {
            *v = (*v - max) - tail;
        }
    }
    out
}
