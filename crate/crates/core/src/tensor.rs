//! Dense row-major f32 tensors and the numeric kernels shared by the
//! differentiation tape.
//!
//! Reductions accumulate in f64 with a fixed, index-ascending order so that
//! every op is bit-deterministic regardless of thread count or shard layout.
//! Broadcasting is limited to row vectors over matrices (`add_row`); anything
//! else needs an explicit reshape.

use crate::{Error, Result};

pub type Shape = Vec<usize>;

/// Dense f32 tensor, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidTensor(format!(
                "zero dimension in shape {shape:?}"
            )));
        }
        if data.len() != expect {
            return Err(Error::InvalidTensor(format!(
                "data length {} does not match shape {shape:?} (expected {expect})",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn full(shape: &[usize], v: f32) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; n] }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    /// Build a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidTensor("no rows".into()));
        }
        let n = rows[0].len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidTensor("ragged rows".into()));
        }
        let data: Vec<f32> = rows.iter().flatten().copied().collect();
        Tensor::new(vec![rows.len(), n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Rows and columns of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            _ => Err(Error::InvalidTensor(format!(
                "expected 2-D tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let n = *self.shape.last().expect("row on 0-d tensor");
        &self.data[i * n..(i + 1) * n]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let n = *self.shape.last().expect("row on 0-d tensor");
        &mut self.data[i * n..(i + 1) * n]
    }

    /// Value of a single-element tensor.
    pub fn scalar_value(&self) -> f32 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn assert_finite(&self, context: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    /// Bitwise equality, strict even for NaN and signed zero.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch { op, lhs: a.shape.clone(), rhs: b.shape.clone() }
}

/// Matrix product `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(shape_err("matmul", a, b));
    }
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let arow = a.row(i);
        let orow = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            let mut acc = 0.0f64;
            for (p, &av) in arow.iter().enumerate() {
                acc += f64::from(av) * f64::from(b.data[p * n + j]);
            }
            orow[j] = acc as f32;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Matrix product against a transposed right operand: `a[m×k] · b[n×k]ᵀ`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (n, k2) = b.dims2()?;
    if k != k2 {
        return Err(shape_err("matmul_nt", a, b));
    }
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let arow = a.row(i);
        for j in 0..n {
            let brow = b.row(j);
            let mut acc = 0.0f64;
            for p in 0..k {
                acc += f64::from(arow[p]) * f64::from(brow[p]);
            }
            out[i * n + j] = acc as f32;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Elementwise sum of two same-shape tensors.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(shape_err("add", a, b));
    }
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape.clone(), data)
}

/// Broadcast-add a length-n row vector to every row of an m×n matrix.
pub fn add_row(a: &Tensor, row: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2()?;
    if row.shape != [n] {
        return Err(shape_err("add_row", a, row));
    }
    let mut data = a.data.clone();
    for i in 0..m {
        for j in 0..n {
            data[i * n + j] += row.data[j];
        }
    }
    Tensor::new(a.shape.clone(), data)
}

/// Elementwise (Hadamard) product.
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(shape_err("mul", a, b));
    }
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
    Tensor::new(a.shape.clone(), data)
}

/// Multiply every element by a constant.
pub fn scale(a: &Tensor, c: f32) -> Tensor {
    let data = a.data.iter().map(|x| x * c).collect();
    Tensor { shape: a.shape.clone(), data }
}

const GELU_COEF: f32 = 0.797_884_56; // sqrt(2/pi)
const GELU_CUBIC: f32 = 0.044_715;

/// GELU activation (tanh approximation).
pub fn gelu(a: &Tensor) -> Tensor {
    let data = a.data.iter().map(|&x| gelu_scalar(x)).collect();
    Tensor { shape: a.shape.clone(), data }
}

pub(crate) fn gelu_scalar(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_COEF * (x + GELU_CUBIC * x * x * x)).tanh())
}

pub(crate) fn gelu_grad_scalar(x: f32) -> f32 {
    let u = GELU_COEF * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let du = GELU_COEF * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub const LAYER_NORM_EPS: f32 = 1e-5;

/// Row-wise layer normalization with learned gain and bias.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (m, n) = x.dims2()?;
    if gain.shape != [n] {
        return Err(shape_err("layer_norm gain", x, gain));
    }
    if bias.shape != [n] {
        return Err(shape_err("layer_norm bias", x, bias));
    }
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let row = x.row(i);
        let (mean, rstd) = row_moments(row);
        for j in 0..n {
            let xhat = (row[j] - mean) * rstd;
            out[i * n + j] = gain.data[j] * xhat + bias.data[j];
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Mean and reciprocal standard deviation of one row (population variance).
pub(crate) fn row_moments(row: &[f32]) -> (f32, f32) {
    let n = row.len() as f64;
    let mut sum = 0.0f64;
    for &v in row {
        sum += f64::from(v);
    }
    let mean = sum / n;
    let mut var = 0.0f64;
    for &v in row {
        let d = f64::from(v) - mean;
        var += d * d;
    }
    var /= n;
    let rstd = 1.0 / (var + f64::from(LAYER_NORM_EPS)).sqrt();
    (mean as f32, rstd as f32)
}

/// Row-wise softmax, stabilized by subtracting the row max.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (m, n) = x.dims2()?;
    x.assert_finite("softmax_rows input")?;
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let row = x.row(i);
        softmax_row_into(row, &mut out[i * n..(i + 1) * n]);
    }
    Tensor::new(vec![m, n], out)
}

pub(crate) fn softmax_row_into(row: &[f32], out: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut denom = 0.0f64;
    for &v in row {
        denom += f64::from(v - max).exp();
    }
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (f64::from(v - max).exp() / denom) as f32;
    }
}

/// Log-probability of entry `idx` under a softmax over `row`.
pub fn log_softmax_pick(row: &[f32], idx: usize) -> f64 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut denom = 0.0f64;
    for &v in row {
        denom += f64::from(v - max).exp();
    }
    f64::from(row[idx] - max) - denom.ln()
}

/// Mean negative log-likelihood of `targets` under row-wise softmax of
/// `logits[T×V]`; row t scores target t.
pub fn cross_entropy(logits: &Tensor, targets: &[u32]) -> Result<f64> {
    let (t, v) = logits.dims2()?;
    if targets.len() != t {
        return Err(Error::InvalidTensor(format!(
            "cross_entropy: {} targets for {} logit rows",
            targets.len(),
            t
        )));
    }
    let mut total = 0.0f64;
    for (i, &tok) in targets.iter().enumerate() {
        if tok as usize >= v {
            return Err(Error::TokenOutOfRange { id: tok, vocab: v });
        }
        total -= log_softmax_pick(logits.row(i), tok as usize);
    }
    Ok(total / t as f64)
}

/// Gather rows of `table` at `ids`.
pub fn lookup_rows(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let (rows, n) = table.dims2()?;
    let mut data = Vec::with_capacity(ids.len() * n);
    for &id in ids {
        if id >= rows {
            return Err(Error::TokenOutOfRange { id: id as u32, vocab: rows });
        }
        data.extend_from_slice(table.row(id));
    }
    Tensor::new(vec![ids.len(), n], data)
}

/// Concatenate matrices with equal row counts along columns.
pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::EmptyInput("concat_cols"));
    }
    let (m, _) = parts[0].dims2()?;
    let mut total = 0;
    for p in parts {
        let (pm, pn) = p.dims2()?;
        if pm != m {
            return Err(shape_err("concat_cols", parts[0], p));
        }
        total += pn;
    }
    let mut data = Vec::with_capacity(m * total);
    for i in 0..m {
        for p in parts {
            data.extend_from_slice(p.row(i));
        }
    }
    Tensor::new(vec![m, total], data)
}

/// Columns `[start, end)` of a matrix.
pub fn slice_cols(a: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    let (m, n) = a.dims2()?;
    if start >= end || end > n {
        return Err(Error::InvalidTensor(format!(
            "slice_cols [{start}, {end}) out of bounds for {n} columns"
        )));
    }
    let w = end - start;
    let mut data = Vec::with_capacity(m * w);
    for i in 0..m {
        data.extend_from_slice(&a.row(i)[start..end]);
    }
    Tensor::new(vec![m, w], data)
}

/// Rows `[start, end)` of a matrix.
pub fn slice_rows(a: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    let (m, n) = a.dims2()?;
    if start >= end || end > m {
        return Err(Error::InvalidTensor(format!(
            "slice_rows [{start}, {end}) out of bounds for {m} rows"
        )));
    }
    Tensor::new(vec![end - start, n], a.data[start * n..end * n].to_vec())
}

/// Sum of all elements, accumulated in index order.
pub fn sum_all(a: &Tensor) -> f64 {
    let mut acc = 0.0f64;
    for &v in &a.data {
        acc += f64::from(v);
    }
    acc
}

/// Mean of all elements.
pub fn mean_all(a: &Tensor) -> f64 {
    sum_all(a) / a.numel() as f64
}
