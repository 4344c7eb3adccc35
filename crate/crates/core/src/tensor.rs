//! Dense row-major `f64` tensors of rank one or two.
//!
//! A rank-one tensor `[d]` behaves as a single row `[1, d]` wherever an
//! operation needs a matrix view.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let valid = !shape.is_empty()
            && shape.len() <= 2
            && shape.iter().all(|&d| d > 0)
            && shape.iter().product::<usize>() == values.len();
        if !valid {
            return Err(Error::InvalidTensor {
                len: values.len(),
                shape,
            });
        }
        Ok(Self { shape, values })
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], values)
    }

    pub fn vector(values: Vec<f64>) -> Result<Self> {
        Self::new(vec![values.len()], values)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            values: vec![value],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.into(),
            values: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.into(),
            values: vec![value; n],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Data("ragged rows".into()));
        }
        let values = rows.iter().flatten().copied().collect();
        Self::matrix(rows.len(), cols, values)
    }

    /// Internal constructor for shapes already known to be valid.
    pub(crate) fn raw(shape: Vec<usize>, values: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Self { shape, values }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    pub fn item(&self) -> f64 {
        self.values[0]
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols() + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let c = self.cols();
        &self.values[row * c..(row + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.into(), self.values.clone())
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.values[i * c + j];
            }
        }
        Self::raw(vec![c, r], out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::raw(
            self.shape.clone(),
            self.values.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn squared_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }
}

/// `a[r, k] x b[k, c]` accumulated into `out[r, c]`.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let out_row = &mut out[i * c..(i + 1) * c];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * c..(p + 1) * c];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `a[r, k] x b[c, k]^T` accumulated into `out[r, c]`.
pub(crate) fn matmul_bt_into(a: &[f64], b: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..c {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            out[i * c + j] += acc;
        }
    }
}

/// `a[k, r]^T x b[k, c]` accumulated into `out[r, c]`.
pub(crate) fn matmul_at_into(a: &[f64], b: &[f64], out: &mut [f64], k: usize, r: usize, c: usize) {
    for p in 0..k {
        let a_row = &a[p * r..(p + 1) * r];
        let b_row = &b[p * c..(p + 1) * c];
        for (i, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[i * c..(i + 1) * c];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0, 3], vec![]).is_err());
        assert!(Tensor::new(vec![2, 2, 2], vec![0.0; 8]).is_err());
    }

    #[test]
    fn vector_is_a_single_row() {
        let t = Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!((t.rows(), t.cols()), (1, 3));
        assert_eq!(t.transpose().shape(), &[3, 1]);
    }

    #[test]
    fn matmul_kernels_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut ab = [0.0; 4];
        matmul_into(&a, &b, &mut ab, 2, 3, 2);
        assert_eq!(ab, [58.0, 64.0, 139.0, 154.0]);

        let bt = Tensor::matrix(3, 2, b.to_vec()).unwrap().transpose();
        let mut ab2 = [0.0; 4];
        matmul_bt_into(&a, bt.values(), &mut ab2, 2, 3, 2);
        assert_eq!(ab, ab2);

        let at = Tensor::matrix(2, 3, a.to_vec()).unwrap().transpose();
        let mut ab3 = [0.0; 4];
        matmul_at_into(at.values(), &b, &mut ab3, 3, 2, 2);
        assert_eq!(ab, ab3);
    }
}
