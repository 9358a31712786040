//! Define-by-run computation tape.
//!
//! Every builder method evaluates its op eagerly and appends a node, so node
//! order is a topological order by construction. `backward` walks the tape in
//! reverse and accumulates gradients for every trainable leaf.

use std::collections::BTreeMap;

use super::tensor::{gauss_jordan_inverse, matmul_nt, matmul_raw, matmul_tn, transpose_raw, Tensor};
use super::NumError;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    MulScalar(Var, Var),
    AddScalar(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Recip(Var),
    Sqrt(Var),
    Softmax(Var),
    LogSumExp(Var),
    SumAll(Var),
    MeanAll(Var),
    SumRows(Var),
    SumCols(Var),
    Transpose(Var),
    Mse(Var, Var),
    CrossEntropy(Var, Vec<usize>),
    L2Norm(Var),
    L2NormRows(Var),
    CosineRows(Var, Var),
    Inverse(Var),
    LogDet(Var),
    Column(Var, usize),
    ConcatCols(Vec<Var>),
    DiagPart(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddRow(..) => "add_row",
            Op::MulCol(..) => "mul_col",
            Op::MulScalar(..) => "mul_scalar",
            Op::AddScalar(..) => "add_scalar",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Recip(..) => "recip",
            Op::Sqrt(..) => "sqrt",
            Op::Softmax(..) => "softmax",
            Op::LogSumExp(..) => "logsumexp",
            Op::SumAll(..) => "sum",
            Op::MeanAll(..) => "mean",
            Op::SumRows(..) => "sum_rows",
            Op::SumCols(..) => "sum_cols",
            Op::Transpose(..) => "transpose",
            Op::Mse(..) => "mse",
            Op::CrossEntropy(..) => "cross_entropy",
            Op::L2Norm(..) => "l2_norm",
            Op::L2NormRows(..) => "l2_norm_rows",
            Op::CosineRows(..) => "cosine_rows",
            Op::Inverse(..) => "inverse",
            Op::LogDet(..) => "logdet",
            Op::Column(..) => "column",
            Op::ConcatCols(..) => "concat_cols",
            Op::DiagPart(..) => "diag",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    trainable: bool,
    needs_grad: bool,
}

/// Norms below this are treated as zero by the cosine and row-norm ops.
pub const NORM_GUARD: f64 = 1e-12;

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to each trainable leaf.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_leaf: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.by_leaf.get(&var)
    }

    /// Gradient for `var`, or zeros of the given shape when the leaf did not
    /// influence the loss.
    pub fn get_or_zeros(&self, var: Var, shape: &[usize]) -> Tensor {
        self.by_leaf
            .get(&var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }
}

fn mismatch(op: &'static str, left: &Tensor, right: &Tensor) -> NumError {
    NumError::ShapeMismatch {
        op,
        left: left.shape().to_vec(),
        right: right.shape().to_vec(),
    }
}

fn same_dims(a: &Tensor, b: &Tensor) -> bool {
    a.dims2() == b.dims2()
}

fn softmax_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *o = (v - max).exp();
            total += *o;
        }
        for o in &mut out[r * cols..(r + 1) * cols] {
            *o /= total;
        }
    }
    out
}

fn row_norms(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    (0..rows)
        .map(|r| {
            x[r * cols..(r + 1) * cols]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

/// log |det A| and the sign of det A, by LU with partial pivoting.
fn log_abs_det(a: &[f64], n: usize) -> (f64, f64) {
    let mut m = a.to_vec();
    let mut sign = 1.0;
    let mut log_det = 0.0;
    for col in 0..n {
        let mut pivot = col;
        for r in (col + 1)..n {
            if m[r * n + col].abs() > m[pivot * n + col].abs() {
                pivot = r;
            }
        }
        let pv = m[pivot * n + col];
        if pv == 0.0 {
            return (f64::NEG_INFINITY, 0.0);
        }
        if pivot != col {
            for j in 0..n {
                m.swap(pivot * n + j, col * n + j);
            }
            sign = -sign;
        }
        if pv < 0.0 {
            sign = -sign;
        }
        log_det += pv.abs().ln();
        for r in (col + 1)..n {
            let f = m[r * n + col] / pv;
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                m[r * n + j] -= f * m[col * n + j];
            }
        }
    }
    (log_det, sign)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Non-trainable leaf (inputs, labels, frozen statistics).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, trainable: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            trainable,
            needs_grad: trainable,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, values: Vec<f64>) -> Result<Var, NumError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(NumError::NonFinite {
                context: format!("output of {}", op.name()),
            });
        }
        let needs_grad = self.inputs_of(&op).iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            op,
            value: Tensor::from_parts(shape, values),
            trainable: false,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs_of(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::AddRow(a, b)
            | Op::MulCol(a, b)
            | Op::MulScalar(a, b)
            | Op::AddScalar(a, b)
            | Op::Mse(a, b)
            | Op::CosineRows(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Shift(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Recip(a)
            | Op::Sqrt(a)
            | Op::Softmax(a)
            | Op::LogSumExp(a)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::SumRows(a)
            | Op::SumCols(a)
            | Op::Transpose(a)
            | Op::CrossEntropy(a, _)
            | Op::L2Norm(a)
            | Op::L2NormRows(a)
            | Op::Inverse(a)
            | Op::LogDet(a)
            | Op::Column(a, _)
            | Op::DiagPart(a) => vec![*a],
            Op::ConcatCols(vs) => vs.clone(),
        }
    }

    fn binary_elementwise(
        &mut self,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var, NumError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !same_dims(ta, tb) {
            return Err(mismatch(op.name(), ta, tb));
        }
        let (r, c) = ta.dims2();
        let values = ta.values().iter().zip(tb.values()).map(|(&x, &y)| f(x, y)).collect();
        self.push(op, vec![r, c], values)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var, NumError> {
        let ta = self.value(a);
        let (r, c) = ta.dims2();
        let values = ta.values().iter().map(|&x| f(x)).collect();
        self.push(op, vec![r, c], values)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((m, k), (k2, n)) = (ta.dims2(), tb.dims2());
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let values = matmul_raw(ta.values(), tb.values(), m, k, n);
        self.push(Op::MatMul(a, b), vec![m, n], values)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.binary_elementwise(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.binary_elementwise(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.binary_elementwise(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.binary_elementwise(a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// Adds a `1×c` row vector to every row of an `r×c` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NumError> {
        let (ta, tb) = (self.value(a), self.value(row));
        let ((r, c), (br, bc)) = (ta.dims2(), tb.dims2());
        if br != 1 || bc != c {
            return Err(mismatch("add_row", ta, tb));
        }
        let mut values = ta.values().to_vec();
        for i in 0..r {
            for (v, &b) in values[i * c..(i + 1) * c].iter_mut().zip(tb.values()) {
                *v += b;
            }
        }
        self.push(Op::AddRow(a, row), vec![r, c], values)
    }

    /// Scales row `i` of an `r×c` matrix by entry `i` of an `r×1` column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var, NumError> {
        let (ta, tb) = (self.value(a), self.value(col));
        let ((r, c), (br, bc)) = (ta.dims2(), tb.dims2());
        if br != r || bc != 1 {
            return Err(mismatch("mul_col", ta, tb));
        }
        let mut values = ta.values().to_vec();
        for i in 0..r {
            let s = tb.values()[i];
            for v in &mut values[i * c..(i + 1) * c] {
                *v *= s;
            }
        }
        self.push(Op::MulCol(a, col), vec![r, c], values)
    }

    /// Multiplies every entry by a `1×1` node.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var, NumError> {
        let (ta, ts) = (self.value(a), self.value(s));
        if !ts.is_scalar() {
            return Err(mismatch("mul_scalar", ta, ts));
        }
        let sv = ts.item();
        let (r, c) = ta.dims2();
        let values = ta.values().iter().map(|v| v * sv).collect();
        self.push(Op::MulScalar(a, s), vec![r, c], values)
    }

    /// Adds a `1×1` node to every entry.
    pub fn add_scalar(&mut self, a: Var, s: Var) -> Result<Var, NumError> {
        let (ta, ts) = (self.value(a), self.value(s));
        if !ts.is_scalar() {
            return Err(mismatch("add_scalar", ta, ts));
        }
        let sv = ts.item();
        let (r, c) = ta.dims2();
        let values = ta.values().iter().map(|v| v + sv).collect();
        self.push(Op::AddScalar(a, s), vec![r, c], values)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, NumError> {
        self.unary(a, Op::Scale(a, factor), |x| x * factor)
    }

    /// Adds a constant to every entry.
    pub fn shift(&mut self, a: Var, offset: f64) -> Result<Var, NumError> {
        self.unary(a, Op::Shift(a), |x| x + offset)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, NumError> {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    /// Rectifier. The derivative at exactly 0 is taken to be 0.
    pub fn relu(&mut self, a: Var) -> Result<Var, NumError> {
        self.unary(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, NumError> {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var, NumError> {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn recip(&mut self, a: Var) -> Result<Var, NumError> {
        self.unary(a, Op::Recip(a), |x| 1.0 / x)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var, NumError> {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var, NumError> {
        let ta = self.value(a);
        let (r, c) = ta.dims2();
        let values = softmax_rows(ta.values(), r, c);
        self.push(Op::Softmax(a), vec![r, c], values)
    }

    /// Row-wise log-sum-exp, `r×c → r×1`.
    pub fn logsumexp(&mut self, a: Var) -> Result<Var, NumError> {
        let ta = self.value(a);
        let (r, c) = ta.dims2();
        let values = (0..r)
            .map(|i| {
                let row = &ta.values()[i * c..(i + 1) * c];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
            })
            .collect();
        self.push(Op::LogSumExp(a), vec![r, 1], values)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NumError> {
        let s = self.value(a).values().iter().sum();
        self.push(Op::SumAll(a), vec![1, 1], vec![s])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, NumError> {
        let ta = self.value(a);
        let s = ta.values().iter().sum::<f64>() / ta.len() as f64;
        self.push(Op::MeanAll(a), vec![1, 1], vec![s])
    }

    /// Sums over rows, `r×c → 1×c`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var, NumError> {
        let ta = self.value(a);
        let (r, c) = ta.dims2();
        let mut values = vec![0.0; c];
        for i in 0..r {
            for (o, &v) in values.iter_mut().zip(&ta.values()[i * c..(i + 1) * c]) {
                *o += v;
            }
        }
        self.push(Op::SumRows(a), vec![1, c], values)
    }

    /// Sums over columns, `r×c → r×1`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var, NumError> {
        let ta = self.value(a);
        let (r, c) = ta.dims2();
        let values = (0..r)
            .map(|i| ta.values()[i * c..(i + 1) * c].iter().sum())
            .collect();
        self.push(Op::SumCols(a), vec![r, 1], values)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumError> {
        let ta = self.value(a);
        let (r, c) = ta.dims2();
        let values = transpose_raw(ta.values(), r, c);
        self.push(Op::Transpose(a), vec![c, r], values)
    }

    /// Mean of squared differences over all entries.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !same_dims(ta, tb) {
            return Err(mismatch("mse", ta, tb));
        }
        let n = ta.len() as f64;
        let s = ta
            .values()
            .iter()
            .zip(tb.values())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        self.push(Op::Mse(a, b), vec![1, 1], vec![s])
    }

    /// Mean softmax cross-entropy of `logits` (r×c) against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, NumError> {
        let tl = self.value(logits);
        let (r, c) = tl.dims2();
        if labels.len() != r || labels.iter().any(|&l| l >= c) {
            return Err(NumError::ShapeMismatch {
                op: "cross_entropy",
                left: tl.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = &tl.values()[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        self.push(
            Op::CrossEntropy(logits, labels.to_vec()),
            vec![1, 1],
            vec![total / r as f64],
        )
    }

    /// Euclidean norm of all entries.
    pub fn l2_norm(&mut self, a: Var) -> Result<Var, NumError> {
        let s = self.value(a).values().iter().map(|v| v * v).sum::<f64>().sqrt();
        self.push(Op::L2Norm(a), vec![1, 1], vec![s])
    }

    /// Euclidean norm of each row, `r×c → r×1`.
    pub fn l2_norm_rows(&mut self, a: Var) -> Result<Var, NumError> {
        let ta = self.value(a);
        let (r, c) = ta.dims2();
        let values = row_norms(ta.values(), r, c);
        self.push(Op::L2NormRows(a), vec![r, 1], values)
    }

    /// Row-wise cosine similarity of two equally shaped matrices, `r×1`.
    /// Rows where either norm is below [`NORM_GUARD`] yield 0.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !same_dims(ta, tb) {
            return Err(mismatch("cosine_rows", ta, tb));
        }
        let (r, c) = ta.dims2();
        let na = row_norms(ta.values(), r, c);
        let nb = row_norms(tb.values(), r, c);
        let values = (0..r)
            .map(|i| {
                if na[i] < NORM_GUARD || nb[i] < NORM_GUARD {
                    return 0.0;
                }
                let dot: f64 = ta.values()[i * c..(i + 1) * c]
                    .iter()
                    .zip(&tb.values()[i * c..(i + 1) * c])
                    .map(|(x, y)| x * y)
                    .sum();
                dot / (na[i] * nb[i])
            })
            .collect();
        self.push(Op::CosineRows(a, b), vec![r, 1], values)
    }

    pub fn inverse(&mut self, a: Var) -> Result<Var, NumError> {
        let ta = self.value(a);
        let (r, c) = ta.dims2();
        if r != c {
            return Err(mismatch("inverse", ta, ta));
        }
        let values = gauss_jordan_inverse(ta.values(), r).ok_or(NumError::Singular { op: "inverse" })?;
        self.push(Op::Inverse(a), vec![r, r], values)
    }

    /// Natural log of the determinant; requires det > 0.
    pub fn logdet(&mut self, a: Var) -> Result<Var, NumError> {
        let ta = self.value(a);
        let (r, c) = ta.dims2();
        if r != c {
            return Err(mismatch("logdet", ta, ta));
        }
        let (ld, sign) = log_abs_det(ta.values(), r);
        if sign <= 0.0 {
            return Err(NumError::NotPositiveDefinite {
                context: "logdet of a matrix with non-positive determinant".into(),
            });
        }
        self.push(Op::LogDet(a), vec![1, 1], vec![ld])
    }

    /// Column `k` as an `r×1` matrix.
    pub fn column(&mut self, a: Var, k: usize) -> Result<Var, NumError> {
        let ta = self.value(a);
        let (r, c) = ta.dims2();
        if k >= c {
            return Err(NumError::ShapeMismatch {
                op: "column",
                left: ta.shape().to_vec(),
                right: vec![k],
            });
        }
        let values = (0..r).map(|i| ta.values()[i * c + k]).collect();
        self.push(Op::Column(a, k), vec![r, 1], values)
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        let first = parts.first().ok_or(NumError::ShapeMismatch {
            op: "concat_cols",
            left: vec![],
            right: vec![],
        })?;
        let rows = self.value(*first).dims2().0;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = self.value(*p).dims2();
            if r != rows {
                return Err(mismatch("concat_cols", self.value(*first), self.value(*p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut values = vec![0.0; rows * total];
        let mut offset = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let tv = self.value(*p).values();
            for i in 0..rows {
                values[i * total + offset..i * total + offset + w].copy_from_slice(&tv[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        self.push(Op::ConcatCols(parts.to_vec()), vec![rows, total], values)
    }

    /// Diagonal of a square matrix as a `1×d` row.
    pub fn diag(&mut self, a: Var) -> Result<Var, NumError> {
        let ta = self.value(a);
        let (r, c) = ta.dims2();
        if r != c {
            return Err(mismatch("diag", ta, ta));
        }
        let values = (0..r).map(|i| ta.values()[i * r + i]).collect();
        self.push(Op::DiagPart(a), vec![1, r], values)
    }

    /// Sign pattern of every relu input on the tape (-1, 0, +1), in order.
    /// Two evaluations whose patterns differ straddle a kink.
    pub fn relu_signature(&self) -> Vec<i8> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(a) = node.op {
                sig.extend(self.value(a).values().iter().map(|&x| {
                    if x > 0.0 {
                        1
                    } else if x < 0.0 {
                        -1
                    } else {
                        0
                    }
                }));
            }
        }
        sig
    }

    /// Reverse-mode gradients of a scalar `loss` with respect to every
    /// trainable leaf that influences it.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumError> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(NumError::NonScalarLoss {
                shape: lt.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if node.trainable {
                out.by_leaf
                    .insert(Var(idx), Tensor::from_parts(node.value.shape().to_vec(), g));
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], var: Var, contrib: Vec<f64>) {
        if !self.nodes[var.0].needs_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contrib) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.values();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ((m, k), (_, n)) = (ta.dims2(), tb.dims2());
                if self.needs(*a) {
                    self.accumulate(grads, *a, matmul_nt(g, tb.values(), m, n, k));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, matmul_tn(ta.values(), g, m, k, n));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).values(), self.value(*b).values());
                self.accumulate(grads, *a, g.iter().zip(tb).map(|(g, b)| g * b).collect());
                self.accumulate(grads, *b, g.iter().zip(ta).map(|(g, a)| g * a).collect());
            }
            Op::Div(a, b) => {
                let (ta, tb) = (self.value(*a).values(), self.value(*b).values());
                self.accumulate(grads, *a, g.iter().zip(tb).map(|(g, b)| g / b).collect());
                self.accumulate(
                    grads,
                    *b,
                    g.iter()
                        .zip(ta.iter().zip(tb))
                        .map(|(g, (a, b))| -g * a / (b * b))
                        .collect(),
                );
            }
            Op::AddRow(a, row) => {
                let (r, c) = self.value(*a).dims2();
                self.accumulate(grads, *a, g.to_vec());
                if self.needs(*row) {
                    let mut gb = vec![0.0; c];
                    for i in 0..r {
                        for (o, v) in gb.iter_mut().zip(&g[i * c..(i + 1) * c]) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *row, gb);
                }
            }
            Op::MulCol(a, col) => {
                let (ta, tc) = (self.value(*a), self.value(*col));
                let (r, c) = ta.dims2();
                if self.needs(*a) {
                    let mut ga = g.to_vec();
                    for i in 0..r {
                        let s = tc.values()[i];
                        for v in &mut ga[i * c..(i + 1) * c] {
                            *v *= s;
                        }
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.needs(*col) {
                    let gc = (0..r)
                        .map(|i| {
                            g[i * c..(i + 1) * c]
                                .iter()
                                .zip(&ta.values()[i * c..(i + 1) * c])
                                .map(|(g, a)| g * a)
                                .sum()
                        })
                        .collect();
                    self.accumulate(grads, *col, gc);
                }
            }
            Op::MulScalar(a, s) => {
                let sv = self.value(*s).item();
                self.accumulate(grads, *a, g.iter().map(|v| v * sv).collect());
                if self.needs(*s) {
                    let gs = g.iter().zip(self.value(*a).values()).map(|(g, a)| g * a).sum();
                    self.accumulate(grads, *s, vec![gs]);
                }
            }
            Op::AddScalar(a, s) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *s, vec![g.iter().sum()]);
            }
            Op::Scale(a, f) => self.accumulate(grads, *a, g.iter().map(|v| v * f).collect()),
            Op::Shift(a) => self.accumulate(grads, *a, g.to_vec()),
            Op::Tanh(a) => {
                self.accumulate(grads, *a, g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect())
            }
            Op::Relu(a) => {
                let x = self.value(*a).values();
                self.accumulate(
                    grads,
                    *a,
                    g.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect(),
                )
            }
            Op::Exp(a) => self.accumulate(grads, *a, g.iter().zip(y).map(|(g, y)| g * y).collect()),
            Op::Log(a) => {
                let x = self.value(*a).values();
                self.accumulate(grads, *a, g.iter().zip(x).map(|(g, x)| g / x).collect())
            }
            Op::Recip(a) => {
                self.accumulate(grads, *a, g.iter().zip(y).map(|(g, y)| -g * y * y).collect())
            }
            Op::Sqrt(a) => {
                self.accumulate(grads, *a, g.iter().zip(y).map(|(g, y)| g / (2.0 * y)).collect())
            }
            Op::Softmax(a) => {
                let (r, c) = node.value.dims2();
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        ga[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LogSumExp(a) => {
                let ta = self.value(*a);
                let (r, c) = ta.dims2();
                let sm = softmax_rows(ta.values(), r, c);
                let ga = (0..r * c).map(|idx| g[idx / c] * sm[idx]).collect();
                self.accumulate(grads, *a, ga);
            }
            Op::SumAll(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::MeanAll(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, vec![g[0] / n as f64; n]);
            }
            Op::SumRows(a) => {
                let (r, c) = self.value(*a).dims2();
                let ga = (0..r * c).map(|idx| g[idx % c]).collect();
                self.accumulate(grads, *a, ga);
            }
            Op::SumCols(a) => {
                let (r, c) = self.value(*a).dims2();
                let ga = (0..r * c).map(|idx| g[idx / c]).collect();
                self.accumulate(grads, *a, ga);
            }
            Op::Transpose(a) => {
                let (r, c) = self.value(*a).dims2();
                // g is c×r
                self.accumulate(grads, *a, transpose_raw(g, c, r));
            }
            Op::Mse(a, b) => {
                let (ta, tb) = (self.value(*a).values(), self.value(*b).values());
                let n = ta.len() as f64;
                let ga: Vec<f64> = ta.iter().zip(tb).map(|(x, y)| g[0] * 2.0 * (x - y) / n).collect();
                if self.needs(*b) {
                    self.accumulate(grads, *b, ga.iter().map(|v| -v).collect());
                }
                self.accumulate(grads, *a, ga);
            }
            Op::CrossEntropy(logits, labels) => {
                let tl = self.value(*logits);
                let (r, c) = tl.dims2();
                let mut ga = softmax_rows(tl.values(), r, c);
                for (i, &label) in labels.iter().enumerate() {
                    ga[i * c + label] -= 1.0;
                }
                let scale = g[0] / r as f64;
                ga.iter_mut().for_each(|v| *v *= scale);
                self.accumulate(grads, *logits, ga);
            }
            Op::L2Norm(a) => {
                let norm = y[0];
                let x = self.value(*a).values();
                let ga = if norm < NORM_GUARD {
                    vec![0.0; x.len()]
                } else {
                    x.iter().map(|v| g[0] * v / norm).collect()
                };
                self.accumulate(grads, *a, ga);
            }
            Op::L2NormRows(a) => {
                let ta = self.value(*a);
                let (r, c) = ta.dims2();
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    if y[i] < NORM_GUARD {
                        continue;
                    }
                    let s = g[i] / y[i];
                    for j in 0..c {
                        ga[i * c + j] = s * ta.values()[i * c + j];
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::CosineRows(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (r, c) = ta.dims2();
                let na = row_norms(ta.values(), r, c);
                let nb = row_norms(tb.values(), r, c);
                let mut ga = vec![0.0; r * c];
                let mut gb = vec![0.0; r * c];
                for i in 0..r {
                    if na[i] < NORM_GUARD || nb[i] < NORM_GUARD {
                        continue;
                    }
                    let cos = y[i];
                    let inv = 1.0 / (na[i] * nb[i]);
                    for j in 0..c {
                        let (av, bv) = (ta.values()[i * c + j], tb.values()[i * c + j]);
                        ga[i * c + j] = g[i] * (bv * inv - cos * av / (na[i] * na[i]));
                        gb[i * c + j] = g[i] * (av * inv - cos * bv / (nb[i] * nb[i]));
                    }
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Inverse(a) => {
                // d(A⁻¹) = -A⁻¹ dA A⁻¹  ⇒  ∂L/∂A = -A⁻ᵀ G A⁻ᵀ
                let (n, _) = node.value.dims2();
                let yt = transpose_raw(y, n, n);
                let tmp = matmul_raw(&yt, g, n, n, n);
                let ga = matmul_raw(&tmp, &yt, n, n, n).into_iter().map(|v| -v).collect();
                self.accumulate(grads, *a, ga);
            }
            Op::LogDet(a) => {
                let ta = self.value(*a);
                let (n, _) = ta.dims2();
                // ∂ log det A / ∂A = A⁻ᵀ
                let inv = gauss_jordan_inverse(ta.values(), n).unwrap_or_else(|| vec![0.0; n * n]);
                let ga = transpose_raw(&inv, n, n).into_iter().map(|v| v * g[0]).collect();
                self.accumulate(grads, *a, ga);
            }
            Op::Column(a, k) => {
                let (r, c) = self.value(*a).dims2();
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    ga[i * c + k] = g[i];
                }
                self.accumulate(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = node.value.dims2();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).dims2().1;
                    if self.needs(*p) {
                        let mut gp = vec![0.0; rows * w];
                        for i in 0..rows {
                            gp[i * w..(i + 1) * w]
                                .copy_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        self.accumulate(grads, *p, gp);
                    }
                    offset += w;
                }
            }
            Op::DiagPart(a) => {
                let (n, _) = self.value(*a).dims2();
                let mut ga = vec![0.0; n * n];
                for i in 0..n {
                    ga[i * n + i] = g[i];
                }
                self.accumulate(grads, *a, ga);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul_is_noop() {
        let mut g = Graph::new();
        let a_vals = [1.0, -2.0, 3.5, 0.0, 4.0, -1.0, 2.0, 2.0, 9.0];
        let i3 = g.constant(Tensor::identity(3));
        let a = g.constant(t(3, 3, &a_vals));
        let out = g.matmul(i3, a).unwrap();
        assert_eq!(g.value(out).values(), &a_vals);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(t(1, 2, &[0.0, 0.0]));
        let s = g.softmax(x).unwrap();
        assert_eq!(g.value(s).values(), &[0.5, 0.5]);
    }

    #[test]
    fn mse_of_equal_inputs_is_zero() {
        let mut g = Graph::new();
        let a = g.constant(t(1, 2, &[1.0, 2.0]));
        let b = g.constant(t(1, 2, &[1.0, 2.0]));
        let m = g.mse(a, b).unwrap();
        assert_eq!(g.value(m).item(), 0.0);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant(t(2, 3, &[0.0; 6]));
        let b = g.constant(t(2, 3, &[0.0; 6]));
        let err = g.matmul(a, b).unwrap_err();
        match &err {
            NumError::ShapeMismatch { op, left, right } => {
                assert_eq!(*op, "matmul");
                assert_eq!(left, &vec![2, 3]);
                assert_eq!(right, &vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(err.to_string().contains("matmul"));
        let c = g.constant(t(3, 2, &[0.0; 6]));
        assert!(g.add(a, c).is_err());
    }

    #[test]
    fn square_has_gradient_six_at_three() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0).unwrap());
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn tanh_sum_gradient_at_zero_is_ones() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[1, 4]));
        let th = g.tanh(x).unwrap();
        let s = g.sum(th).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().values(), &[1.0; 4]);
    }

    #[test]
    fn relu_gradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.param(t(1, 3, &[-1.0, 0.0, 2.0]));
        let r = g.relu(x).unwrap();
        let s = g.sum(r).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().values(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.param(t(1, 2, &[1.0, 2.0]));
        let y = g.tanh(x).unwrap();
        assert!(matches!(g.backward(y), Err(NumError::NonScalarLoss { .. })));
    }

    #[test]
    fn non_finite_outputs_abort() {
        let mut g = Graph::new();
        let x = g.constant(t(1, 1, &[0.0]));
        assert!(matches!(g.log(x), Err(NumError::NonFinite { .. })));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.constant(t(2, 3, &[1e3, -1e3, 0.5, 3.0, 2.0, 1.0]));
        let s = g.softmax(x).unwrap();
        for row in g.value(s).values().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn cosine_guard_returns_zero() {
        let mut g = Graph::new();
        let a = g.constant(t(2, 2, &[0.0, 0.0, 1.0, 0.0]));
        let b = g.constant(t(2, 2, &[1.0, 1.0, 1.0, 0.0]));
        let c = g.cosine_rows(a, b).unwrap();
        assert_eq!(g.value(c).values(), &[0.0, 1.0]);
    }

    #[test]
    fn gradients_skip_constants() {
        let mut g = Graph::new();
        let w = g.param(t(2, 1, &[1.0, 2.0]));
        let x = g.constant(t(1, 2, &[3.0, 4.0]));
        let y = g.matmul(x, w).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads.get(w).unwrap().values(), &[3.0, 4.0]);
        assert!(grads.get(x).is_none());
    }
}
