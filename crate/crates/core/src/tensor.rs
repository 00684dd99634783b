//! Dense row-major `f64` arrays and the handful of kernels the networks need.
//!
//! Convolution follows the cross-correlation convention used by CNN layers:
//! the kernel is not flipped, so `out[i] = sum_j signal[i + j] * kernel[j]`.
//! The spectral analysis in [`crate::interpret`] uses the same tap order.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(Error::Parameter(format!(
            "tensor dimensions must all be >= 1, got {shape:?}"
        )));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n = check_shape(&shape)?;
        if n != data.len() {
            return Err(Error::Dimension {
                op: "Tensor::new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "Tensor::new" });
        }
        Ok(Self { shape, data })
    }

    /// Panics on an invalid shape; for internal use with shapes known to be valid.
    pub fn zeros(shape: &[usize]) -> Self {
        let n = check_shape(shape).expect("valid shape");
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let k = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::Parameter("ragged rows".into()));
        }
        Self::new(vec![m, k], rows.concat())
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the buffer. Callers are responsible for keeping values finite.
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

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn l1_norm(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum()
    }

    pub fn scale(&self, a: f64) -> Result<Self> {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * a).collect(),
        }
        .ensure_finite("scale")
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip(other, "sub", |a, b| a - b)
    }

    fn zip(&self, other: &Self, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Dimension {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
        .ensure_finite(op)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, k) = self.matrix_dims("transpose")?;
        let mut out = Self::zeros(&[k, m]);
        for i in 0..m {
            for j in 0..k {
                out.data[j * m + i] = self.data[i * k + j];
            }
        }
        Ok(out)
    }

    fn matrix_dims(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [m, k] => Ok((m, k)),
            _ => Err(Error::Dimension {
                op,
                lhs: self.shape.clone(),
                rhs: vec![],
            }),
        }
    }
}

/// Matrix product `a · b`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.matrix_dims("matmul")?;
    let (k2, p) = b.matrix_dims("matmul")?;
    if k != k2 {
        return Err(Error::Dimension {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = Tensor::zeros(&[m, p]);
    for i in 0..m {
        let orow = &mut out.data[i * p..(i + 1) * p];
        for r in 0..k {
            let av = a.data[i * k + r];
            let brow = &b.data[r * p..(r + 1) * p];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out.ensure_finite("matmul")
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = a.matrix_dims("matmul_tn")?;
    let (k2, p) = b.matrix_dims("matmul_tn")?;
    if k != k2 {
        return Err(Error::Dimension {
            op: "matmul_tn",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = Tensor::zeros(&[m, p]);
    for r in 0..k {
        let brow = &b.data[r * p..(r + 1) * p];
        for i in 0..m {
            let av = a.data[r * m + i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out.data[i * p..(i + 1) * p];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out.ensure_finite("matmul_tn")
}

/// Valid-mode 1-d cross-correlation of two vectors.
pub fn conv1d_valid(signal: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    if signal.shape.len() != 1 || kernel.shape.len() != 1 || kernel.len() > signal.len() {
        return Err(Error::Dimension {
            op: "conv1d_valid",
            lhs: signal.shape.clone(),
            rhs: kernel.shape.clone(),
        });
    }
    let mut out = vec![0.0; signal.len() - kernel.len() + 1];
    correlate_into(&signal.data, &kernel.data, &mut out);
    Tensor::vector(out)
}

/// Accumulates `out[i] += sum_j signal[i + j] * kernel[j]` for every `i` in `out`.
#[inline]
pub(crate) fn correlate_into(signal: &[f64], kernel: &[f64], out: &mut [f64]) {
    for (j, &kv) in kernel.iter().enumerate() {
        if kv == 0.0 {
            continue;
        }
        let s = &signal[j..j + out.len()];
        for (o, &sv) in out.iter_mut().zip(s) {
            *o += kv * sv;
        }
    }
}

/// Sample covariance of the rows of `x` (variables × samples), divisor `T - 1`.
pub fn covariance(x: &Tensor) -> Result<Tensor> {
    let (n, t) = x.matrix_dims("covariance")?;
    if t < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: t });
    }
    let mut centered = x.clone();
    for i in 0..n {
        let row = centered.row_mut(i);
        let mean = row.iter().sum::<f64>() / t as f64;
        row.iter_mut().for_each(|v| *v -= mean);
    }
    let mut out = Tensor::zeros(&[n, n]);
    let denom = (t - 1) as f64;
    for i in 0..n {
        for j in i..n {
            let s: f64 = centered
                .row(i)
                .iter()
                .zip(centered.row(j))
                .map(|(a, b)| a * b)
                .sum();
            out.data[i * n + j] = s / denom;
            out.data[j * n + i] = s / denom;
        }
    }
    out.ensure_finite("covariance")
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky(a: &Tensor) -> Result<Tensor> {
    let (n, n2) = a.matrix_dims("cholesky")?;
    if n != n2 {
        return Err(Error::Dimension {
            op: "cholesky",
            lhs: a.shape.clone(),
            rhs: vec![],
        });
    }
    let mut l = Tensor::zeros(&[n, n]);
    for j in 0..n {
        let mut d = a.data[j * n + j];
        for k in 0..j {
            d -= l.data[j * n + k].powi(2);
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::Singular { pivot: j, value: d });
        }
        let d = d.sqrt();
        l.data[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a.data[i * n + j];
            for k in 0..j {
                s -= l.data[i * n + k] * l.data[j * n + k];
            }
            l.data[i * n + j] = s / d;
        }
    }
    Ok(l)
}

/// Inverse of `a + ridge·I` for symmetric positive definite `a + ridge·I`,
/// through an LDLᵀ factorization.
pub fn sym_inverse(a: &Tensor, ridge: f64) -> Result<Tensor> {
    let (n, n2) = a.matrix_dims("sym_inverse")?;
    if n != n2 {
        return Err(Error::Dimension {
            op: "sym_inverse",
            lhs: a.shape.clone(),
            rhs: vec![],
        });
    }
    let mut shifted = a.clone();
    for i in 0..n {
        shifted.data[i * n + i] += ridge;
    }
    // LDLᵀ without pivoting; every pivot must be positive.
    let mut l = Tensor::identity(n);
    let mut d = vec![0.0; n];
    for j in 0..n {
        let mut dj = shifted.data[j * n + j];
        for k in 0..j {
            dj -= l.data[j * n + k].powi(2) * d[k];
        }
        if !(dj > 0.0) || !dj.is_finite() {
            return Err(Error::Singular { pivot: j, value: dj });
        }
        d[j] = dj;
        for i in j + 1..n {
            let mut s = shifted.data[i * n + j];
            for k in 0..j {
                s -= l.data[i * n + k] * l.data[j * n + k] * d[k];
            }
            l.data[i * n + j] = s / dj;
        }
    }
    // Solve L·D·Lᵀ·X = I column by column.
    let mut inv = Tensor::zeros(&[n, n]);
    let mut y = vec![0.0; n];
    for col in 0..n {
        for i in 0..n {
            let mut s = if i == col { 1.0 } else { 0.0 };
            for k in 0..i {
                s -= l.data[i * n + k] * y[k];
            }
            y[i] = s;
        }
        for (yi, di) in y.iter_mut().zip(&d) {
            *yi /= di;
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= l.data[k * n + i] * inv.data[k * n + col];
            }
            inv.data[i * n + col] = s;
        }
    }
    // Symmetrize away rounding asymmetry.
    for i in 0..n {
        for j in i + 1..n {
            let m = 0.5 * (inv.data[i * n + j] + inv.data[j * n + i]);
            inv.data[i * n + j] = m;
            inv.data[j * n + i] = m;
        }
    }
    inv.ensure_finite("sym_inverse")
}

/// Max pooling over a 1-d sequence. Returns pooled values and the argmax index
/// (into `input`) for every window; ties resolve to the first maximum.
pub fn max_pool1d(input: &[f64], factor: usize, stride: usize) -> (Vec<f64>, Vec<usize>) {
    let n_out = pooled_len(input.len(), factor, stride);
    let mut values = Vec::with_capacity(n_out);
    let mut argmax = Vec::with_capacity(n_out);
    for p in 0..n_out {
        let start = p * stride;
        let mut best = start;
        for i in start + 1..start + factor {
            if input[i] > input[best] {
                best = i;
            }
        }
        values.push(input[best]);
        argmax.push(best);
    }
    (values, argmax)
}

/// Number of complete pooling windows over a sequence of length `len`.
pub fn pooled_len(len: usize, factor: usize, stride: usize) -> usize {
    if len < factor {
        0
    } else {
        (len - factor) / stride + 1
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}
