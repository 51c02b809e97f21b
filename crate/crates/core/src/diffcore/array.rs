use serde::{Deserialize, Serialize};

use super::Scalar;
use crate::error::{numeric, shape as shape_error, Result};

/// Row-major dense array. Batches are rank-2 `[rows, cols]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseArray<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> DenseArray<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return shape_error(format!(
                "shape {shape:?} does not match {} elements",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![T::ZERO; len],
        }
    }

    pub fn filled(shape: Vec<usize>, value: T) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![value; len],
        }
    }

    /// Rank-2 array from a row-major buffer.
    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return shape_error("ragged rows".to_string());
        }
        let data = rows.iter().flatten().copied().collect();
        Self::matrix(rows.len(), cols, data)
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

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() < 2 {
            1
        } else {
            self.shape[1..].iter().product()
        }
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: T) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    pub fn ensure_shape(&self, rows: usize, cols: usize, what: &str) -> Result<()> {
        if self.rows() != rows || self.cols() != cols {
            return shape_error(format!(
                "{what}: expected [{rows}, {cols}], got {:?}",
                self.shape
            ));
        }
        Ok(())
    }

    /// Fails with a numeric error naming `what` if any entry is NaN or infinite.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            return numeric(format!("{what}: non-finite value at flat index {pos}"));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return shape_error(format!("{:?} vs {:?}", self.shape, other.shape));
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

    pub fn cast<U: Scalar>(&self) -> DenseArray<U> {
        DenseArray {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.to_f64())).collect(),
        }
    }

    /// Columns `[start, start + width)` of a rank-2 array.
    pub fn columns(&self, start: usize, width: usize) -> Self {
        let rows = self.rows();
        let mut data = Vec::with_capacity(rows * width);
        for i in 0..rows {
            data.extend_from_slice(&self.row(i)[start..start + width]);
        }
        Self {
            shape: vec![rows, width],
            data,
        }
    }

    /// Horizontal concatenation of rank-2 arrays with equal row counts.
    pub fn hstack(parts: &[&Self]) -> Result<Self> {
        let rows = parts.first().map_or(0, |p| p.rows());
        if parts.iter().any(|p| p.rows() != rows) {
            return shape_error("hstack: row counts differ".to_string());
        }
        let cols: usize = parts.iter().map(|p| p.cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Ok(Self {
            shape: vec![rows, cols],
            data,
        })
    }

    /// Rows selected by index, in order.
    pub fn gather_rows(&self, idx: &[usize]) -> Self {
        let cols = self.cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        if shape.is_empty() {
            shape.push(idx.len());
        } else {
            shape[0] = idx.len();
        }
        Self { shape, data }
    }

    /// Each row repeated `times` times consecutively.
    pub fn repeat_rows(&self, times: usize) -> Self {
        let idx: Vec<usize> = (0..self.rows())
            .flat_map(|i| std::iter::repeat_n(i, times))
            .collect();
        self.gather_rows(&idx)
    }

    pub fn sum_sq_f64(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64() * v.to_f64()).sum()
    }

    /// Euclidean norm of every row, accumulated in f64.
    pub fn row_norms(&self) -> Vec<f64> {
        (0..self.rows())
            .map(|i| {
                self.row(i)
                    .iter()
                    .map(|v| v.to_f64().powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect()
    }
}
