use super::{Result, Tensor, TensorError};

/// Matrix product `a[m×k] · b[k×n]`, accumulated in `f64`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(TensorError::Shape {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0f32; m * n];
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for p in 0..k {
            let x = ad[i * k + p] as f64;
            if x == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (s, &y) in acc.iter_mut().zip(brow) {
                *s += x * y as f64;
            }
        }
        for (o, s) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = *s as f32;
        }
    }
    Ok(Tensor::from_kernel(vec![m, n], out))
}

/// Additive attention mask: each entry is either `0` or `-inf`.
///
/// Kept apart from [`Tensor`] because tensors are finite by construction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AdditiveMask {
    rows: usize,
    cols: usize,
    masked: Vec<bool>,
}

impl AdditiveMask {
    /// Parses mask values; only `0.0` and `-inf` are accepted.
    pub fn from_values(rows: usize, cols: usize, values: &[f32]) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(TensorError::Length {
                shape: vec![rows, cols],
                len: values.len(),
                expected: rows * cols,
            });
        }
        let masked = values
            .iter()
            .enumerate()
            .map(|(index, &value)| {
                if value == 0.0 {
                    Ok(false)
                } else if value == f32::NEG_INFINITY {
                    Ok(true)
                } else {
                    Err(TensorError::BadMask { index, value })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { rows, cols, masked })
    }

    /// Lower-triangular causal mask: query `i` may not see key `j > i`.
    pub fn causal(n: usize) -> Self {
        let masked = (0..n * n).map(|f| f % n > f / n).collect();
        Self {
            rows: n,
            cols: n,
            masked,
        }
    }

    pub fn is_masked(&self, row: usize, col: usize) -> bool {
        self.masked[row * self.cols + col]
    }

    /// The mask in its additive form.
    pub fn values(&self) -> Vec<f32> {
        self.masked
            .iter()
            .map(|&m| if m { f32::NEG_INFINITY } else { 0.0 })
            .collect()
    }
}

/// Row-wise softmax with optional additive mask.
///
/// Uses per-row max subtraction; masked entries are written as exact zeros.
pub fn softmax_rows(x: &Tensor, mask: Option<&AdditiveMask>) -> Result<Tensor> {
    let (m, n) = x.dims2("softmax_rows")?;
    if let Some(mask) = mask {
        if (mask.rows, mask.cols) != (m, n) {
            return Err(TensorError::Shape {
                op: "softmax_rows",
                left: x.shape().to_vec(),
                right: vec![mask.rows, mask.cols],
            });
        }
    }
    let visible = |i: usize, j: usize| mask.is_none_or(|mk| !mk.is_masked(i, j));
    let mut out = vec![0.0f32; m * n];
    let mut exps = vec![0.0f64; n];
    for i in 0..m {
        let row = x.row(i);
        let max = (0..n)
            .filter(|&j| visible(i, j))
            .map(|j| row[j] as f64)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(TensorError::DegenerateRow { row: i });
        }
        let mut sum = 0.0f64;
        for j in 0..n {
            exps[j] = if visible(i, j) {
                (row[j] as f64 - max).exp()
            } else {
                0.0
            };
            sum += exps[j];
        }
        for j in 0..n {
            out[i * n + j] = (exps[j] / sum) as f32;
        }
    }
    Ok(Tensor::from_kernel(vec![m, n], out))
}
