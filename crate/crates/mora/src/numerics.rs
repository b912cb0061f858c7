//! Dense f64 linear algebra, a mask-aware softmax, and top-k selection.
//!
//! Everything downstream (gating, adapters, the trainer) is built on these
//! three primitives, so their edge cases are pinned here once: masked entries
//! are the `NEG_INF` sentinel, softmax subtracts the finite max before
//! exponentiating, and top-k breaks ties toward the lowest index.

use serde::{Deserialize, Serialize};

use crate::{MoraError, Result};

/// Sentinel for masked-out scores. `stable_softmax` maps it to an exact 0.
pub const NEG_INF: f64 = f64::NEG_INFINITY;

/// Dense vector of f64 values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DenseVector {
    pub data: Vec<f64>,
}

impl DenseVector {
    pub fn new(data: Vec<f64>) -> Self {
        Self { data }
    }

    pub fn zeros(len: usize) -> Self {
        Self { data: vec![0.0; len] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Dot product. Lengths must match.
    pub fn dot(&self, other: &DenseVector) -> Result<f64> {
        if self.len() != other.len() {
            return Err(MoraError::DimensionMismatch {
                context: "dot",
                expected: self.len(),
                got: other.len(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .sum())
    }

    /// `self += scale * other`. Lengths must match.
    pub fn axpy(&mut self, scale: f64, other: &DenseVector) -> Result<()> {
        if self.len() != other.len() {
            return Err(MoraError::DimensionMismatch {
                context: "axpy",
                expected: self.len(),
                got: other.len(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }
}

/// Dense row-major matrix of f64 values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DenseMatrix {
    /// Builds a matrix from row-major data. `data.len()` must equal `rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(MoraError::DimensionMismatch {
                context: "matrix data length",
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// Row `r` as a slice.
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `M x`. `x.len()` must equal `cols`.
    pub fn matvec(&self, x: &DenseVector) -> Result<DenseVector> {
        if x.len() != self.cols {
            return Err(MoraError::DimensionMismatch {
                context: "matvec",
                expected: self.cols,
                got: x.len(),
            });
        }
        let mut out = Vec::with_capacity(self.rows);
        for r in 0..self.rows {
            let row = self.row(r);
            let mut acc = 0.0;
            for (a, b) in row.iter().zip(&x.data) {
                acc += a * b;
            }
            out.push(acc);
        }
        Ok(DenseVector::new(out))
    }

    /// `M^T x`. `x.len()` must equal `rows`.
    pub fn matvec_t(&self, x: &DenseVector) -> Result<DenseVector> {
        if x.len() != self.rows {
            return Err(MoraError::DimensionMismatch {
                context: "matvec_t",
                expected: self.rows,
                got: x.len(),
            });
        }
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            let xv = x.data[r];
            for (c, a) in self.row(r).iter().enumerate() {
                out[c] += a * xv;
            }
        }
        Ok(DenseVector::new(out))
    }
}

/// Softmax with max-subtraction. Entries equal to `NEG_INF` come out as an
/// exact 0; all entries masked is an error. The output sums to 1 within 1e-12.
pub fn stable_softmax(scores: &[f64]) -> Result<Vec<f64>> {
    let max = scores
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(MoraError::AllMasked);
    }
    let mut out: Vec<f64> = scores
        .iter()
        .map(|&v| if v == NEG_INF { 0.0 } else { (v - max).exp() })
        .collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    Ok(out)
}

/// Indices of the `min(k, len)` largest entries, ties broken toward the lowest
/// index. The result is sorted ascending. `k == 0` is an error.
pub fn topk_indices(values: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(MoraError::InvalidBudget);
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    // Stable sort by descending value keeps equal entries in index order.
    order.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap());
    let mut kept: Vec<usize> = order.into_iter().take(k).collect();
    kept.sort_unstable();
    Ok(kept)
}
