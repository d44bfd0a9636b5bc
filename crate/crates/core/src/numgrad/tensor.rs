//! Dense row-major tensors of 64-bit floats.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements, data has {got}")]
    ShapeDataMismatch {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("matmul needs rank-2 operands with matching inner dims, got {lhs:?} x {rhs:?}")]
    MatmulShape { lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("shapes {from:?} and {to:?} are not broadcast-compatible")]
    BroadcastShape { from: Vec<usize>, to: Vec<usize> },
    #[error("zero-sized dimension in shape {0:?}")]
    ZeroDim(Vec<usize>),
}

/// Dense numeric array with shape; all model math and gradients move through it.
///
/// Data is stored flat in row-major order; `product(shape) == data.len()` always
/// holds for a constructed tensor. Scalars are represented as shape `[1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ZeroDim(shape));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                expected,
                got: data.len(),
                shape,
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// A tensor holding exactly one value, whatever its rank.
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// Row-major element access by multi-index. Test / cold-path helper.
    pub fn at(&self, index: &[usize]) -> f64 {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, &ix) in index.iter().enumerate() {
            debug_assert!(ix < self.shape[i]);
            flat = flat * self.shape[i] + ix;
        }
        self.data[flat]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.zip(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.zip(other, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| c * v)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    /// In-place accumulate; shapes must already agree.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<(), TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor, TensorError> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        let err = || TensorError::MatmulShape {
            lhs: self.shape.clone(),
            rhs: other.shape.clone(),
        };
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(err());
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let row = &other.data[p * n..(p + 1) * n];
                let dst = &mut out[i * n..(i + 1) * n];
                for (d, &b) in dst.iter_mut().zip(row) {
                    *d += a * b;
                }
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transposed(&self) -> Result<Tensor, TensorError> {
        if self.rank() != 2 {
            return Err(TensorError::MatmulShape {
                lhs: self.shape.clone(),
                rhs: vec![],
            });
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data,
        })
    }

    /// Pads `from` with leading ones to the rank of `to` and checks per-axis
    /// compatibility (equal or source dim 1).
    pub fn broadcast_compatible(from: &[usize], to: &[usize]) -> bool {
        if from.len() > to.len() {
            return false;
        }
        let offset = to.len() - from.len();
        from.iter()
            .enumerate()
            .all(|(i, &d)| d == to[offset + i] || d == 1)
    }

    /// Materialized numpy-style broadcast to `target`.
    pub fn broadcast_to(&self, target: &[usize]) -> Result<Tensor, TensorError> {
        if !Tensor::broadcast_compatible(&self.shape, target) {
            return Err(TensorError::BroadcastShape {
                from: self.shape.clone(),
                to: target.to_vec(),
            });
        }
        if self.shape == target {
            return Ok(self.clone());
        }
        let mut padded = vec![1usize; target.len() - self.shape.len()];
        padded.extend_from_slice(&self.shape);
        let src_strides = row_major_strides(&padded);
        let len: usize = target.iter().product();
        let mut data = vec![0.0; len];
        let mut idx = vec![0usize; target.len()];
        for slot in data.iter_mut() {
            let mut src = 0;
            for (ax, &i) in idx.iter().enumerate() {
                if padded[ax] != 1 {
                    src += i * src_strides[ax];
                }
            }
            *slot = self.data[src];
            increment_index(&mut idx, target);
        }
        Tensor::new(target.to_vec(), data)
    }

    /// Inverse of `broadcast_to`: sum-reduce a gradient of shape `self.shape`
    /// back down to `original`.
    pub fn reduce_to(&self, original: &[usize]) -> Result<Tensor, TensorError> {
        if !Tensor::broadcast_compatible(original, &self.shape) {
            return Err(TensorError::BroadcastShape {
                from: original.to_vec(),
                to: self.shape.clone(),
            });
        }
        if self.shape == original {
            return Ok(self.clone());
        }
        let mut padded = vec![1usize; self.shape.len() - original.len()];
        padded.extend_from_slice(original);
        let dst_strides = row_major_strides(&padded);
        let dst_len: usize = original.iter().product();
        let mut data = vec![0.0; dst_len];
        let mut idx = vec![0usize; self.shape.len()];
        for &v in &self.data {
            let mut dst = 0;
            for (ax, &i) in idx.iter().enumerate() {
                if padded[ax] != 1 {
                    dst += i * dst_strides[ax];
                }
            }
            data[dst] += v;
            increment_index(&mut idx, &self.shape);
        }
        Tensor::new(original.to_vec(), data)
    }
}

pub(crate) fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

pub(crate) fn increment_index(idx: &mut [usize], shape: &[usize]) {
    for ax in (0..idx.len()).rev() {
        idx[ax] += 1;
        if idx[ax] < shape[ax] {
            return;
        }
        idx[ax] = 0;
    }
}
