//! Dense row-major `f32` tensors and the numeric kernels the rest of the
//! crate is built on.
//!
//! Storage is always 32-bit; reductions (matmul, softmax, means) accumulate
//! in `f64` and round on store so results do not depend on summation order
//! tricks of any particular platform.

mod ops;
mod prng;
pub mod stt;

pub use ops::{matmul, softmax_rows, AdditiveMask};
pub use prng::{random_tensor, Prng};

use std::fmt;

/// Errors raised by tensor construction, kernels and STT I/O.
#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?} (expected {expected})")]
    Length {
        shape: Vec<usize>,
        len: usize,
        expected: usize,
    },
    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f32 },
    #[error("softmax row {row} is fully masked")]
    DegenerateRow { row: usize },
    #[error("invalid mask entry {value} at flat index {index} (expected 0 or -inf)")]
    BadMask { index: usize, value: f32 },
    #[error("stt format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense row-major tensor of finite `f32` values.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, checking the length against the shape and rejecting
    /// NaN/Inf entries.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected = shape.iter().product::<usize>();
        if data.len() != expected {
            return Err(TensorError::Length {
                shape,
                len: data.len(),
                expected,
            });
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(TensorError::NonFinite { index, value });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: Vec<usize>, value: f32) -> Self {
        assert!(value.is_finite(), "fill value must be finite");
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Row-major 2-D constructor from nested rows; panics on ragged input.
    pub fn from_rows(rows: &[&[f32]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self::new(
            vec![rows.len(), cols],
            rows.iter().flat_map(|r| r.iter().copied()).collect(),
        )
    }

    /// Builds a tensor from values produced internally by a kernel. Kernels
    /// guarantee finiteness; a violation is a bug, so this panics.
    pub(crate) fn from_kernel(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        assert!(
            data.iter().all(|v| v.is_finite()),
            "kernel produced a non-finite value"
        );
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(TensorError::Shape {
                op,
                left: self.shape.clone(),
                right: vec![],
            }),
        }
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(TensorError::Shape {
                op: "reshape",
                left: self.shape,
                right: shape,
            });
        }
        Ok(Self {
            shape,
            data: self.data,
        })
    }

    /// Element of a rank-2 tensor.
    pub fn at(&self, row: usize, col: usize) -> f32 {
        let cols = self.shape[self.shape.len() - 1];
        self.data[row * cols + col]
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f32] {
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        let cols = self.shape.get(1).copied().unwrap_or(0).max(1);
        self.data.chunks(cols)
    }

    /// Gathers rows of a rank-2 tensor in the given order.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Self> {
        let (rows, cols) = self.dims2("gather_rows")?;
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(TensorError::Shape {
                    op: "gather_rows",
                    left: self.shape.clone(),
                    right: vec![i],
                });
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Self {
            shape: vec![indices.len(), cols],
            data,
        })
    }

    /// Stacks rank-2 tensors with equal column counts.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Self> {
        let cols = match parts.first() {
            Some(t) => t.dims2("concat_rows")?.1,
            None => return Ok(Self::zeros(vec![0, 0])),
        };
        let mut data = Vec::new();
        let mut rows = 0;
        for t in parts {
            let (r, c) = t.dims2("concat_rows")?;
            if c != cols {
                return Err(TensorError::Shape {
                    op: "concat_rows",
                    left: parts[0].shape.clone(),
                    right: t.shape.clone(),
                });
            }
            rows += r;
            data.extend_from_slice(&t.data);
        }
        Ok(Self {
            shape: vec![rows, cols],
            data,
        })
    }

    pub fn transpose(&self) -> Result<Self> {
        let (rows, cols) = self.dims2("transpose")?;
        let mut data = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                data[j * rows + i] = self.data[i * cols + j];
            }
        }
        Ok(Self {
            shape: vec![cols, rows],
            data,
        })
    }

    /// Elementwise sum of equal-shape tensors.
    pub fn add(&self, other: &Tensor) -> Result<Self> {
        if self.shape != other.shape {
            return Err(TensorError::Shape {
                op: "add",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Self::from_kernel(self.shape.clone(), data))
    }

    pub fn scale(&self, factor: f32) -> Self {
        Self::from_kernel(
            self.shape.clone(),
            self.data.iter().map(|v| v * factor).collect(),
        )
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self::from_kernel(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// Columns `start..end` of a rank-2 tensor.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Self> {
        let (rows, cols) = self.dims2("slice_cols")?;
        if start > end || end > cols {
            return Err(TensorError::Shape {
                op: "slice_cols",
                left: self.shape.clone(),
                right: vec![start, end],
            });
        }
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in self.rows() {
            data.extend_from_slice(&r[start..end]);
        }
        Ok(Self {
            shape: vec![rows, end - start],
            data,
        })
    }

    /// Writes `src` into columns `start..start + src.cols` of a rank-2 tensor.
    pub fn set_cols(&mut self, start: usize, src: &Tensor) -> Result<()> {
        let (rows, cols) = self.dims2("set_cols")?;
        let (src_rows, src_cols) = src.dims2("set_cols")?;
        if src_rows != rows || start + src_cols > cols {
            return Err(TensorError::Shape {
                op: "set_cols",
                left: self.shape.clone(),
                right: src.shape.clone(),
            });
        }
        for i in 0..rows {
            self.data[i * cols + start..i * cols + start + src_cols]
                .copy_from_slice(src.row(i));
        }
        Ok(())
    }

    /// Slice `i` along the leading axis, as a tensor of rank `rank - 1`.
    pub fn index_axis0(&self, i: usize) -> Self {
        let inner: usize = self.shape[1..].iter().product();
        Self {
            shape: self.shape[1..].to_vec(),
            data: self.data[i * inner..(i + 1) * inner].to_vec(),
        }
    }

    /// Stacks equal-shape tensors along a new leading axis.
    pub fn stack(parts: &[Tensor]) -> Result<Self> {
        let Some(first) = parts.first() else {
            return Err(TensorError::Shape {
                op: "stack",
                left: vec![],
                right: vec![],
            });
        };
        let mut data = Vec::with_capacity(first.len() * parts.len());
        for t in parts {
            if t.shape != first.shape {
                return Err(TensorError::Shape {
                    op: "stack",
                    left: first.shape.clone(),
                    right: t.shape.clone(),
                });
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self { shape, data })
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?} ", self.shape)?;
        let head = &self.data[..self.data.len().min(PREVIEW)];
        if self.data.len() > PREVIEW {
            write!(f, "{head:?}..")
        } else {
            write!(f, "{head:?}")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_length_mismatch_and_nan() {
        assert!(matches!(
            Tensor::new(vec![2, 2], vec![0.0; 3]),
            Err(TensorError::Length { expected: 4, .. })
        ));
        assert!(matches!(
            Tensor::new(vec![2], vec![0.0, f32::NAN]),
            Err(TensorError::NonFinite { index: 1, .. })
        ));
        assert!(Tensor::new(vec![1], vec![f32::NEG_INFINITY]).is_err());
    }

    #[test]
    fn gather_concat_transpose() {
        let t = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]).unwrap();
        let g = t.gather_rows(&[2, 0]).unwrap();
        assert_eq!(g.data(), &[5.0, 6.0, 1.0, 2.0]);
        let c = Tensor::concat_rows(&[&g, &t]).unwrap();
        assert_eq!(c.shape(), &[5, 2]);
        let tt = t.transpose().unwrap();
        assert_eq!(tt.shape(), &[2, 3]);
        assert_eq!(tt.data(), &[1.0, 3.0, 5.0, 2.0, 4.0, 6.0]);
        assert!(t.gather_rows(&[3]).is_err());
    }

    #[test]
    fn cols_round_trip() {
        let t = Tensor::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]).unwrap();
        let mid = t.slice_cols(1, 3).unwrap();
        assert_eq!(mid.data(), &[2.0, 3.0, 5.0, 6.0]);
        let mut z = Tensor::zeros(vec![2, 3]);
        z.set_cols(1, &mid).unwrap();
        assert_eq!(z.data(), &[0.0, 2.0, 3.0, 0.0, 5.0, 6.0]);
    }
}
