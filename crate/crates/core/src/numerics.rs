//! Dense row-major matrices and the differentiable kernels the encoder is
//! built from. Each kernel has a matching `*_backward` that maps an output
//! gradient to input gradients; the model chains them by hand.

use std::fmt::Debug;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating-point element type. Training runs in `f32`, gradient checks in `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }
}

impl<T> Scalar for T where
    T: Float
        + FromPrimitive
        + ToPrimitive
        + AddAssign
        + SubAssign
        + MulAssign
        + DivAssign
        + Default
        + Debug
        + Send
        + Sync
        + 'static
{
}

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    /// Checked constructor: positive dimensions, matching length, finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::Shape {
                op: "from_vec",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("matrix entries".into()));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape {
                op: "from_rows",
                left: (rows.len(), cols),
                right: (0, 0),
            });
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: T) {
        self.data[row * self.cols + col] = value;
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .map(|v| U::from(*v).expect("finite cast"))
                .collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|v| *v = T::zero());
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same("add_assign", other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }

    /// `self += scale * other`, elementwise.
    pub fn add_scaled(&mut self, other: &Self, scale: T) -> Result<()> {
        self.check_same("add_scaled", other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * *b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: T) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    /// Adds a `1 x cols` row vector to every row.
    pub fn add_row_broadcast(&mut self, bias: &Self) -> Result<()> {
        if bias.rows != 1 || bias.cols != self.cols {
            return Err(Error::Shape {
                op: "add_row_broadcast",
                left: self.shape(),
                right: bias.shape(),
            });
        }
        for row in self.data.chunks_exact_mut(self.cols) {
            for (a, b) in row.iter_mut().zip(&bias.data) {
                *a += *b;
            }
        }
        Ok(())
    }

    /// Column sums as a `1 x cols` row, accumulated into `into`.
    pub fn accumulate_column_sums(&self, into: &mut Self) -> Result<()> {
        if into.rows != 1 || into.cols != self.cols {
            return Err(Error::Shape {
                op: "column_sums",
                left: self.shape(),
                right: into.shape(),
            });
        }
        for row in self.data.chunks_exact(self.cols) {
            for (a, b) in into.data.iter_mut().zip(row) {
                *a += *b;
            }
        }
        Ok(())
    }

    fn check_same(&self, op: &'static str, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4 * 4;
    for (ca, cb) in a[..chunks].chunks_exact(4).zip(b[..chunks].chunks_exact(4)) {
        for l in 0..4 {
            acc[l] += ca[l] * cb[l];
        }
    }
    let mut tail = T::zero();
    for (x, y) in a[chunks..].iter().zip(&b[chunks..]) {
        tail += *x * *y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn axpy<T: Scalar>(out: &mut [T], scale: T, x: &[T]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += scale * *v;
    }
}

/// `a · b`.
pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(Error::Shape {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik != T::zero() {
                axpy(out_row, aik, &b.data[k * b.cols..(k + 1) * b.cols]);
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ`.
pub fn matmul_nt<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.cols {
        return Err(Error::Shape {
            op: "matmul_nt",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ar = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(ar, b.row(j));
        }
    }
    Ok(out)
}

/// `aᵀ · b`, accumulated into `into` (which must be `a.cols x b.cols`).
pub fn matmul_tn_acc<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>, into: &mut Matrix<T>) -> Result<()> {
    if a.rows != b.rows || into.rows != a.cols || into.cols != b.cols {
        return Err(Error::Shape {
            op: "matmul_tn",
            left: a.shape(),
            right: b.shape(),
        });
    }
    for i in 0..a.rows {
        let br = &b.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik != T::zero() {
                axpy(&mut into.data[k * b.cols..(k + 1) * b.cols], aik, br);
            }
        }
    }
    Ok(())
}

/// Gradients of `a · b` given the output gradient: `(g·bᵀ, aᵀ·g)`.
pub fn matmul_backward<T: Scalar>(
    a: &Matrix<T>,
    b: &Matrix<T>,
    grad_out: &Matrix<T>,
) -> Result<(Matrix<T>, Matrix<T>)> {
    let ga = matmul_nt(grad_out, b)?;
    let mut gb = Matrix::zeros(b.rows, b.cols);
    matmul_tn_acc(a, grad_out, &mut gb)?;
    Ok((ga, gb))
}

/// In-place stable softmax over the entries of `row` where `mask` is true;
/// masked-out entries become exactly zero.
pub fn softmax_masked_in_place<T: Scalar>(row: &mut [T], mask: Option<&[bool]>) -> Result<()> {
    let kept = |i: usize| mask.is_none_or(|m| m[i]);
    let max = (0..row.len())
        .filter(|&i| kept(i))
        .map(|i| row[i])
        .fold(None, |acc: Option<T>, v| Some(acc.map_or(v, |a| a.max(v))))
        .ok_or(Error::EmptyMask)?;
    let mut sum = T::zero();
    for (i, v) in row.iter_mut().enumerate() {
        if kept(i) {
            *v = (*v - max).exp();
            sum += *v;
        } else {
            *v = T::zero();
        }
    }
    let inv = T::one() / sum;
    row.iter_mut().for_each(|v| *v *= inv);
    Ok(())
}

/// Softmax of a `1 x L` score row restricted to `mask`.
pub fn softmax_masked<T: Scalar>(scores: &Matrix<T>, mask: &[bool]) -> Result<Matrix<T>> {
    if scores.rows != 1 || mask.len() != scores.cols {
        return Err(Error::Shape {
            op: "softmax_masked",
            left: scores.shape(),
            right: (1, mask.len()),
        });
    }
    let mut out = scores.clone();
    softmax_masked_in_place(&mut out.data, Some(mask))?;
    Ok(out)
}

/// Gradient through a softmax row: `p ⊙ (g − Σ p g)`. Masked entries have
/// `p = 0` and so receive zero gradient.
pub fn softmax_backward<T: Scalar>(probs: &[T], grad_out: &[T], grad_in: &mut [T]) {
    let weighted = dot(probs, grad_out);
    for ((gi, p), g) in grad_in.iter_mut().zip(probs).zip(grad_out) {
        *gi = *p * (*g - weighted);
    }
}

/// Saved activations for [`layer_norm_backward`].
#[derive(Clone, Debug)]
pub struct LayerNormCache<T> {
    pub normalized: Matrix<T>,
    pub inv_std: Vec<T>,
}

pub fn layer_norm_forward<T: Scalar>(
    x: &Matrix<T>,
    gain: &Matrix<T>,
    bias: &Matrix<T>,
    eps: T,
) -> Result<(Matrix<T>, LayerNormCache<T>)> {
    let d = x.cols;
    if gain.shape() != (1, d) || bias.shape() != (1, d) {
        return Err(Error::Shape {
            op: "layer_norm",
            left: x.shape(),
            right: gain.shape(),
        });
    }
    let n = T::from_usize(d).expect("width fits");
    let mut normalized = Matrix::zeros(x.rows, d);
    let mut out = Matrix::zeros(x.rows, d);
    let mut inv_std = Vec::with_capacity(x.rows);
    for i in 0..x.rows {
        let row = x.row(i);
        let mean = row.iter().fold(T::zero(), |a, &v| a + v) / n;
        let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
        let inv = T::one() / (var + eps).sqrt();
        inv_std.push(inv);
        for j in 0..d {
            let xh = (row[j] - mean) * inv;
            normalized.data[i * d + j] = xh;
            out.data[i * d + j] = xh * gain.data[j] + bias.data[j];
        }
    }
    Ok((out, LayerNormCache { normalized, inv_std }))
}

/// Row-wise layer normalization with learned gain and bias.
pub fn layer_norm<T: Scalar>(
    x: &Matrix<T>,
    gain: &Matrix<T>,
    bias: &Matrix<T>,
    eps: T,
) -> Result<Matrix<T>> {
    layer_norm_forward(x, gain, bias, eps).map(|(out, _)| out)
}

/// Returns `dx` and accumulates `dgain`, `dbias`.
pub fn layer_norm_backward<T: Scalar>(
    cache: &LayerNormCache<T>,
    gain: &Matrix<T>,
    grad_out: &Matrix<T>,
    dgain: &mut Matrix<T>,
    dbias: &mut Matrix<T>,
) -> Matrix<T> {
    let (rows, d) = grad_out.shape();
    let n = T::from_usize(d).expect("width fits");
    let mut dx = Matrix::zeros(rows, d);
    let mut dxhat = vec![T::zero(); d];
    for i in 0..rows {
        let g = grad_out.row(i);
        let xh = cache.normalized.row(i);
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xh = T::zero();
        for j in 0..d {
            dgain.data[j] += g[j] * xh[j];
            dbias.data[j] += g[j];
            dxhat[j] = g[j] * gain.data[j];
            sum_dxhat += dxhat[j];
            sum_dxhat_xh += dxhat[j] * xh[j];
        }
        let scale = cache.inv_std[i] / n;
        let out = dx.row_mut(i);
        for j in 0..d {
            out[j] = scale * (n * dxhat[j] - sum_dxhat - xh[j] * sum_dxhat_xh);
        }
    }
    dx
}

fn gelu_consts<T: Scalar>() -> (T, T, T) {
    (
        T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt()),
        T::from_f64_lossy(0.044715),
        T::from_f64_lossy(0.5),
    )
}

/// GELU, tanh approximation.
pub fn gelu<T: Scalar>(x: T) -> T {
    let (c, a, half) = gelu_consts::<T>();
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let (c, a, half) = gelu_consts::<T>();
    let three = T::from_f64_lossy(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

/// A scalar function with an analytic gradient, for [`grad_check`].
pub trait Objective {
    fn value(&mut self, params: &[f64]) -> Result<f64>;
    fn gradient(&mut self, params: &[f64]) -> Result<Vec<f64>>;
}

/// Adapts a value closure and a gradient closure into an [`Objective`].
pub struct FnObjective<V, G>(pub V, pub G);

impl<V, G> Objective for FnObjective<V, G>
where
    V: FnMut(&[f64]) -> Result<f64>,
    G: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    fn value(&mut self, params: &[f64]) -> Result<f64> {
        (self.0)(params)
    }

    fn gradient(&mut self, params: &[f64]) -> Result<Vec<f64>> {
        (self.1)(params)
    }
}

/// Worst element found by [`grad_check_report`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares the analytic gradient with central differences and returns the
/// largest elementwise `|a − b| / max(1e−8, |a| + |b|)`.
pub fn grad_check<O: Objective>(objective: &mut O, params: &[f64], eps: f64) -> Result<f64> {
    grad_check_report(objective, params, eps).map(|r| r.max_relative_error)
}

/// [`grad_check`], also reporting where the worst disagreement is.
pub fn grad_check_report<O: Objective>(
    objective: &mut O,
    params: &[f64],
    eps: f64,
) -> Result<GradCheckReport> {
    if eps.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::Config("grad_check eps must be positive".into()));
    }
    let finite = |v: f64, what: &str| {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    };
    finite(objective.value(params)?, "objective")?;
    let analytic = objective.gradient(params)?;
    if analytic.len() != params.len() {
        return Err(Error::Shape {
            op: "grad_check",
            left: (params.len(), 1),
            right: (analytic.len(), 1),
        });
    }
    let mut probe = params.to_vec();
    let mut report = GradCheckReport::default();
    for i in 0..params.len() {
        probe[i] = params[i] + eps;
        let plus = finite(objective.value(&probe)?, "objective")?;
        probe[i] = params[i] - eps;
        let minus = finite(objective.value(&probe)?, "objective")?;
        probe[i] = params[i];
        let numeric = (plus - minus) / (2.0 * eps);
        let a = finite(analytic[i], "gradient")?;
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        if rel > report.max_relative_error {
            report = GradCheckReport {
                max_relative_error: rel,
                worst_index: i,
                analytic: a,
                numeric,
            };
        }
    }
    Ok(report)
}
