use serde::{Deserialize, Serialize};

use super::NumError;

/// Dense row-major tensor of `f64` values.
///
/// Every value is finite; construction rejects NaN and infinities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self, NumError> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(NumError::InvalidShape { shape });
        }
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(NumError::LengthMismatch {
                shape,
                len: values.len(),
            });
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(NumError::NonFinite {
                context: format!("tensor construction (index {pos})"),
            });
        }
        Ok(Self { shape, values })
    }

    /// Builds a 2-D tensor from row-major values.
    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, NumError> {
        Self::new(vec![rows, cols], values)
    }

    pub fn row(values: Vec<f64>) -> Result<Self, NumError> {
        let n = values.len();
        Self::new(vec![1, n], values)
    }

    pub fn scalar(value: f64) -> Result<Self, NumError> {
        Self::new(vec![1, 1], vec![value])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            values: vec![0.0; n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.values[i * n + i] = 1.0;
        }
        t
    }

    /// Internal constructor for values already known to be finite and sized.
    pub(crate) fn from_parts(shape: Vec<usize>, values: Vec<f64>) -> Self {
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

    /// Interprets the tensor as a matrix. Rank-1 tensors are row vectors.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => {
                let last = *self.shape.last().unwrap_or(&1);
                (self.values.len() / last, last)
            }
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        let (_, c) = self.dims2();
        self.values[row * c + col]
    }

    pub fn item(&self) -> f64 {
        self.values[0]
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// `a (m×k) · b (k×n)` into a fresh buffer.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `aᵀ (k×m)ᵀ · b (k×n)`: a is stored k×m.
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a (m×k) · bᵀ` where b is stored n×k.
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            out[i * n + j] = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    }
    out
}

pub(crate) fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
/// Returns `None` when a pivot is not strictly positive.
pub fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut diag = a[j * n + j];
        for p in 0..j {
            diag -= l[j * n + p] * l[j * n + p];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return None;
        }
        let d = diag.sqrt();
        l[j * n + j] = d;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for p in 0..j {
                s -= l[i * n + p] * l[j * n + p];
            }
            l[i * n + j] = s / d;
        }
    }
    Some(l)
}

/// Solves `L y = b` for lower-triangular `L`.
pub fn forward_substitute(l: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for p in 0..i {
            s -= l[i * n + p] * y[p];
        }
        y[i] = s / l[i * n + i];
    }
    y
}

/// General inverse by Gauss-Jordan elimination with partial pivoting.
pub(crate) fn gauss_jordan_inverse(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut m = a.to_vec();
    let mut inv = Tensor::identity(n).values;
    for col in 0..n {
        let pivot = (col..n).max_by(|&x, &y| {
            m[x * n + col]
                .abs()
                .partial_cmp(&m[y * n + col].abs())
                .unwrap_or(std::cmp::Ordering::Equal)
        })?;
        let pv = m[pivot * n + col];
        if pv.abs() < 1e-300 {
            return None;
        }
        if pivot != col {
            for j in 0..n {
                m.swap(pivot * n + j, col * n + j);
                inv.swap(pivot * n + j, col * n + j);
            }
        }
        for j in 0..n {
            m[col * n + j] /= pv;
            inv[col * n + j] /= pv;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = m[r * n + col];
            if f == 0.0 {
                continue;
            }
            for j in 0..n {
                m[r * n + j] -= f * m[col * n + j];
                inv[r * n + j] -= f * inv[col * n + j];
            }
        }
    }
    Some(inv)
}
