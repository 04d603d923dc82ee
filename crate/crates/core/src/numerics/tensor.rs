//! Dense row-major tensors over f64.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::structure(format!("zero extent in shape {shape:?}")));
        }
        if data.len() != expect {
            return Err(Error::structure(format!(
                "data length {} does not match shape {:?} (expected {})",
                data.len(),
                shape,
                expect
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Matrix-vector product for a [rows, cols] tensor.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.shape.len(), 2, "matvec needs a rank-2 tensor");
        let (rows, cols) = (self.shape[0], self.shape[1]);
        assert_eq!(cols, x.len(), "matvec dimension mismatch");
        let mut out = vec![0.0; rows];
        for r in 0..rows {
            let row = &self.data[r * cols..(r + 1) * cols];
            let mut acc = 0.0;
            for (w, xi) in row.iter().zip(x) {
                acc += w * xi;
            }
            out[r] = acc;
        }
        out
    }

    /// Transposed matrix-vector product: W^T y for a [rows, cols] tensor.
    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(self.shape.len(), 2, "matvec_t needs a rank-2 tensor");
        let (rows, cols) = (self.shape[0], self.shape[1]);
        assert_eq!(rows, y.len(), "matvec_t dimension mismatch");
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            let row = &self.data[r * cols..(r + 1) * cols];
            let yr = y[r];
            for (o, w) in out.iter_mut().zip(row) {
                *o += w * yr;
            }
        }
        out
    }
}

/// Squared Euclidean distance between two equal-length slices.
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

pub fn euclidean_distance(a: &[f64], b: &[f64]) -> f64 {
    squared_distance(a, b).sqrt()
}
