//! Dense row-major tensors and the deterministic numeric kernels the rest of
//! the crate is built on.
//!
//! Everything here is plain scalar code with a fixed accumulation order, so
//! results are bit-reproducible across runs on the same platform. The model
//! stack instantiates these kernels at `f32`; the theory bench uses `f64`.

use std::fmt;

use thiserror::Error;

/// Element type for tensor math. Implemented for `f32` and `f64`.
pub trait Scalar:
    Copy
    + PartialOrd
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn max_s(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            #[inline]
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                self.exp()
            }
            #[inline]
            fn ln(self) -> Self {
                self.ln()
            }
            #[inline]
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            #[inline]
            fn abs(self) -> Self {
                self.abs()
            }
            #[inline]
            fn max_s(self, other: Self) -> Self {
                if self > other {
                    self
                } else {
                    other
                }
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);

/// Errors produced by the numeric kernels.
#[derive(Debug, Error)]
pub enum NumericError {
    #[error("dimension mismatch: {op} with shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op} requires a square matrix, got {shape:?}")]
    NotSquare { op: &'static str, shape: Vec<usize> },
    #[error("empty input to {op}")]
    EmptyInput { op: &'static str },
    #[error("index {index} out of range for extent {extent} in {op}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("non-finite value encountered in {op} at flat index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("invalid argument to {op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
}

pub type NumResult<V> = Result<V, NumericError>;

/// Dense tensor with row-major flat storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> NumResult<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(NumericError::InvalidArgument {
                op: "Tensor::new",
                msg: format!("shape {shape:?} expects {expect} scalars, got {}", data.len()),
            });
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

    /// Row-major matrix constructor.
    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self { shape: vec![r, c], data }
    }

    pub fn vector(data: Vec<T>) -> Self {
        let n = data.len();
        Self { shape: vec![n], data }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![1], data: vec![value] }
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Number of rows when viewed as a matrix (rank-2 only).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.shape[1] + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut T {
        &mut self.data[r * self.shape[1] + c]
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v.to_f64()).collect(),
        }
    }

    pub fn from_f64_tensor(t: &Tensor<f64>) -> Self {
        Self {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&v| T::from_f64(v)).collect(),
        }
    }
}

fn shape_err<T>(op: &'static str, a: &Tensor<impl Scalar>, b: &Tensor<impl Scalar>) -> NumResult<T> {
    Err(NumericError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    })
}

/// Matrix product with fixed i-k-j loop order: each output entry accumulates
/// over k left to right, so results are deterministic.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> NumResult<Tensor<T>> {
    if !a.is_matrix() || !b.is_matrix() || a.cols() != b.rows() {
        return shape_err("matmul", a, b);
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![T::ZERO; m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &bd[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

pub fn transpose<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    assert!(a.is_matrix(), "transpose expects a matrix");
    let (m, n) = (a.rows(), a.cols());
    let mut out = vec![T::ZERO; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data()[i * n + j];
        }
    }
    Tensor { shape: vec![n, m], data: out }
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> NumResult<Tensor<T>> {
    if a.shape() != b.shape() {
        return shape_err("add", a, b);
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Ok(Tensor { shape: a.shape.clone(), data })
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> NumResult<Tensor<T>> {
    if a.shape() != b.shape() {
        return shape_err("sub", a, b);
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x - y).collect();
    Ok(Tensor { shape: a.shape.clone(), data })
}

pub fn scale<T: Scalar>(a: &Tensor<T>, c: T) -> Tensor<T> {
    a.map(|v| v * c)
}

/// Column-causal scaled softmax over an `n x n` score matrix.
///
/// Column `j` holds the attention weights of query `j`: entries at rows
/// `0..=j` are `softmax(scale * scores[0..=j, j])`, rows `> j` are exactly 0.
pub fn causal_softmax<T: Scalar>(scores: &Tensor<T>, scale: T) -> NumResult<Tensor<T>> {
    if !scores.is_matrix() || scores.rows() != scores.cols() {
        return Err(NumericError::NotSquare {
            op: "causal_softmax",
            shape: scores.shape().to_vec(),
        });
    }
    if !(scale > T::ZERO) {
        return Err(NumericError::InvalidArgument {
            op: "causal_softmax",
            msg: format!("scale must be positive, got {scale}"),
        });
    }
    let n = scores.rows();
    let mut out = Tensor::zeros(vec![n, n]);
    for j in 0..n {
        let mut m = scores.at(0, j) * scale;
        for i in 1..=j {
            m = m.max_s(scores.at(i, j) * scale);
        }
        let mut denom = T::ZERO;
        for i in 0..=j {
            let e = (scores.at(i, j) * scale - m).exp();
            *out.at_mut(i, j) = e;
            denom += e;
        }
        for i in 0..=j {
            *out.at_mut(i, j) = out.at(i, j) / denom;
        }
    }
    Ok(out)
}

/// Normalize each column of `x` (d x n) to zero mean / unit variance, then
/// apply elementwise gain and bias (both length d). Variance is the population
/// variance stabilized by `eps`.
pub fn layer_norm_cols<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> NumResult<Tensor<T>> {
    if !x.is_matrix() {
        return shape_err("layer_norm", x, gain);
    }
    let d = x.rows();
    if d == 0 {
        return Err(NumericError::EmptyInput { op: "layer_norm" });
    }
    if gain.len() != d || bias.len() != d {
        return shape_err("layer_norm", x, gain);
    }
    if !(eps > T::ZERO) {
        return Err(NumericError::InvalidArgument {
            op: "layer_norm",
            msg: "eps must be positive".into(),
        });
    }
    let n = x.cols();
    let inv_d = T::ONE / T::from_f64(d as f64);
    let mut out = Tensor::zeros(vec![d, n]);
    for j in 0..n {
        let mut mean = T::ZERO;
        for i in 0..d {
            mean += x.at(i, j);
        }
        mean = mean * inv_d;
        let mut var = T::ZERO;
        for i in 0..d {
            let c = x.at(i, j) - mean;
            var += c * c;
        }
        var = var * inv_d;
        let inv_std = T::ONE / (var + eps).sqrt();
        for i in 0..d {
            let xh = (x.at(i, j) - mean) * inv_std;
            *out.at_mut(i, j) = xh * gain.data()[i] + bias.data()[i];
        }
    }
    Ok(out)
}

/// Vector form of layer normalization (d-length input).
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> NumResult<Tensor<T>> {
    let d = x.len();
    if d == 0 {
        return Err(NumericError::EmptyInput { op: "layer_norm" });
    }
    let col = Tensor::new(vec![d, 1], x.data().to_vec())?;
    let out = layer_norm_cols(&col, gain, bias, eps)?;
    Tensor::new(vec![d], out.into_data())
}

/// Mean negative log-softmax of the target entry per position.
/// `logits` is V x n, `targets` holds n ids below V.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> NumResult<T> {
    if !logits.is_matrix() || logits.cols() != targets.len() {
        return Err(NumericError::InvalidArgument {
            op: "cross_entropy",
            msg: format!(
                "logits shape {:?} incompatible with {} targets",
                logits.shape(),
                targets.len()
            ),
        });
    }
    let v = logits.rows();
    let n = logits.cols();
    if n == 0 {
        return Err(NumericError::EmptyInput { op: "cross_entropy" });
    }
    for (pos, &t) in targets.iter().enumerate() {
        if t >= v {
            return Err(NumericError::IndexOutOfRange {
                op: "cross_entropy",
                index: t,
                extent: v,
            });
        }
        let _ = pos;
    }
    let mut total = T::ZERO;
    for (j, &t) in targets.iter().enumerate() {
        let mut m = logits.at(0, j);
        for i in 1..v {
            m = m.max_s(logits.at(i, j));
        }
        let mut denom = T::ZERO;
        for i in 0..v {
            denom += (logits.at(i, j) - m).exp();
        }
        total += denom.ln() + m - logits.at(t, j);
    }
    Ok(total / T::from_f64(n as f64))
}

/// Central finite differences `(f(x + h e_i) - f(x - h e_i)) / 2h` per
/// coordinate; the independent gradient oracle used throughout the tests.
pub fn finite_diff_grad<T: Scalar>(
    f: &mut dyn FnMut(&Tensor<T>) -> T,
    x: &Tensor<T>,
    h: T,
) -> NumResult<Tensor<T>> {
    if !(h > T::ZERO) {
        return Err(NumericError::InvalidArgument {
            op: "finite_diff_grad",
            msg: "step must be positive".into(),
        });
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape().to_vec());
    let two_h = h + h;
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(NumericError::NonFinite {
                op: "finite_diff_grad",
                index: i,
            });
        }
        grad.data_mut()[i] = (up - down) / two_h;
    }
    Ok(grad)
}

/// Frobenius norm.
pub fn frob_norm<T: Scalar>(a: &Tensor<T>) -> T {
    let mut s = T::ZERO;
    for &v in a.data() {
        s += v * v;
    }
    s.sqrt()
}

/// Max absolute elementwise difference.
pub fn max_abs_diff<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> T {
    assert_eq!(a.shape(), b.shape());
    let mut m = T::ZERO;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        m = m.max_s((x - y).abs());
    }
    m
}
