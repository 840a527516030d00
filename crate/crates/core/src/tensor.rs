//! Dense row-major `f64` tensors.
//!
//! Only what the layer vocabulary needs is provided: construction with
//! validation, 2-D matrix products in the three orientations used by a dense
//! layer's forward and backward pass, and a few elementwise helpers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, rejecting zero extents, length mismatches and
    /// non-finite entries.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidConfig(format!(
                "tensor shape must have positive extents, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape("tensor data", &[expected], &[data.len()]));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "tensor construction",
                index,
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::shape("tensor rows", &[cols], &[bad.len()]));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(vec![1], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the flat buffer. Callers must keep entries finite.
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

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Product of all extents after the first.
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// Gathers rows by index into a new `[idx.len(), cols]` tensor.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        if idx.is_empty() {
            return Err(Error::Empty("row selection"));
        }
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= self.rows() {
                return Err(Error::shape("row selection", &[self.rows()], &[i]));
            }
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Ok(Self { shape, data })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape("elementwise op", &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    fn check_matrix(&self, context: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::shape(context, &[0, 0], &self.shape));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    /// `self · otherᵀ` for `self: [m, k]`, `other: [n, k]`.
    pub fn matmul_transposed(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.check_matrix("matmul lhs")?;
        let (n, k2) = other.check_matrix("matmul rhs")?;
        if k != k2 {
            return Err(Error::shape("matmul inner dimension", &[k], &[k2]));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b = &other.data[j * k..(j + 1) * k];
                out[i * n + j] = dot(a, b);
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// `self · other` for `self: [m, k]`, `other: [k, n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.check_matrix("matmul lhs")?;
        let (k2, n) = other.check_matrix("matmul rhs")?;
        if k != k2 {
            return Err(Error::shape("matmul inner dimension", &[k], &[k2]));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let b = &other.data[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(b) {
                    *o += a * bv;
                }
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// `selfᵀ · other` for `self: [m, a]`, `other: [m, b]`, giving `[a, b]`.
    pub fn transposed_matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, a) = self.check_matrix("matmul lhs")?;
        let (m2, b) = other.check_matrix("matmul rhs")?;
        if m != m2 {
            return Err(Error::shape("matmul batch dimension", &[m], &[m2]));
        }
        let mut out = vec![0.0; a * b];
        for r in 0..m {
            let lhs = &self.data[r * a..(r + 1) * a];
            let rhs = &other.data[r * b..(r + 1) * b];
            for (i, &l) in lhs.iter().enumerate() {
                if l == 0.0 {
                    continue;
                }
                let row = &mut out[i * b..(i + 1) * b];
                for (o, &rv) in row.iter_mut().zip(rhs) {
                    *o += l * rv;
                }
            }
        }
        Ok(Tensor {
            shape: vec![a, b],
            data: out,
        })
    }

    /// Sums a `[m, n]` matrix over rows, giving `[n]`.
    pub fn sum_rows(&self) -> Result<Tensor> {
        let (m, n) = self.check_matrix("row sum")?;
        let mut out = vec![0.0; n];
        for r in 0..m {
            for (o, v) in out.iter_mut().zip(&self.data[r * n..(r + 1) * n]) {
                *o += v;
            }
        }
        Ok(Tensor {
            shape: vec![n],
            data: out,
        })
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let c = logits.cols();
    let mut out = logits.clone();
    for row in out.data.chunks_mut(c) {
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
    out
}
