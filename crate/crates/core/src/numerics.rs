//! Dense row-major matrix kernel with explicit backward passes.
//!
//! Every forward operation used by the matching models has a matching
//! `*_backward` function here. Gradients are checked against
//! [`finite_diff_gradient`] in the tests at the bottom of this file and in the
//! model-level gradient checks.

use std::fmt;
use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};

/// Norm below which a vector is treated as the zero vector by [`cosine`].
pub const ZERO_NORM: f64 = 1e-12;

/// Dense matrix of `f64`, stored row-major.
#[derive(Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Mat[{}x{}]", self.rows, self.cols)?;
        let mut list = f.debug_list();
        for r in 0..self.rows {
            list.entry(&self.row(r));
        }
        list.finish()
    }
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Mat { rows, cols, data })
    }

    /// Builds a matrix from row slices. Panics on ragged input; intended for
    /// literals in tests and fixtures.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Mat {
            rows: rows.len(),
            cols,
            data,
        }
    }

    /// A single-column matrix.
    pub fn column_vector(values: &[f64]) -> Self {
        Mat {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Mat {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.data[r * self.cols + c]).collect()
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Element-wise `self += other`.
    pub fn add_assign(&mut self, other: &Mat) -> Result<()> {
        self.check_same_shape(other, "add")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Element-wise `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &Mat) -> Result<()> {
        self.check_same_shape(other, "add_scaled")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn scaled(&self, alpha: f64) -> Mat {
        let mut out = self.clone();
        out.scale(alpha);
        out
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|r| self.row(r).iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        out
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(parts: &[&Mat]) -> Result<Mat> {
        let cols = parts.first().map_or(0, |m| m.cols);
        if let Some(bad) = parts.iter().find(|m| m.cols != cols) {
            return Err(Error::shape(format!(
                "vstack: {}x{} does not have {cols} columns",
                bad.rows, bad.cols
            )));
        }
        let rows = parts.iter().map(|m| m.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for m in parts {
            data.extend_from_slice(&m.data);
        }
        Ok(Mat { rows, cols, data })
    }

    /// Copies rows `start..start + count` into a new matrix.
    pub fn row_block(&self, start: usize, count: usize) -> Mat {
        Mat {
            rows: count,
            cols: self.cols,
            data: self.data[start * self.cols..(start + count) * self.cols].to_vec(),
        }
    }

    fn check_same_shape(&self, other: &Mat, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(format!(
                "{op}: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }
}

impl Index<(usize, usize)> for Mat {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `a · b`.
pub fn matmul(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.cols != b.rows {
        return Err(Error::shape(format!(
            "matmul: {}x{} · {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Mat::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik != 0.0 {
                axpy(aik, b.row(k), out_row);
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ`.
pub fn matmul_bt(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.cols != b.cols {
        return Err(Error::shape(format!(
            "matmul_bt: {}x{} · ({}x{})ᵀ",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Mat::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(a.row(i), b.row(j));
        }
    }
    Ok(out)
}

/// `aᵀ · b`.
pub fn matmul_at(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.rows != b.rows {
        return Err(Error::shape(format!(
            "matmul_at: ({}x{})ᵀ · {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Mat::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let b_row = b.row(k);
        for (i, &aki) in a.row(k).iter().enumerate() {
            if aki != 0.0 {
                axpy(aki, b_row, &mut out.data[i * b.cols..(i + 1) * b.cols]);
            }
        }
    }
    Ok(out)
}

/// Cosine similarity; 0 when either vector has norm below [`ZERO_NORM`].
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape(format!(
            "cosine: lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    Ok(cosine_unchecked(u, v))
}

pub(crate) fn cosine_unchecked(u: &[f64], v: &[f64]) -> f64 {
    let nu = dot(u, u).sqrt();
    let nv = dot(v, v).sqrt();
    if nu < ZERO_NORM || nv < ZERO_NORM {
        return 0.0;
    }
    dot(u, v) / (nu * nv)
}

/// Accumulates `upstream · ∂cos(u,v)/∂u` into `du` and likewise for `dv`.
/// The zero-vector case contributes nothing.
pub fn cosine_backward(u: &[f64], v: &[f64], upstream: f64, du: &mut [f64], dv: &mut [f64]) {
    let nu = dot(u, u).sqrt();
    let nv = dot(v, v).sqrt();
    if nu < ZERO_NORM || nv < ZERO_NORM || upstream == 0.0 {
        return;
    }
    let inv = 1.0 / (nu * nv);
    let c = dot(u, v) * inv;
    let cu = c / (nu * nu);
    let cv = c / (nv * nv);
    for i in 0..u.len() {
        du[i] += upstream * (v[i] * inv - cu * u[i]);
        dv[i] += upstream * (u[i] * inv - cv * v[i]);
    }
}

/// Wide convolution followed by `tanh`.
///
/// `input` is a vertical stack of channel maps (`c·d_in` rows, `s` columns)
/// and `filter` has one row per output feature with `input.rows() · w`
/// columns, ordered window-offset-major: column `k·(c·d_in) + r` multiplies
/// row `r` of the `k`-th column in the window. The input is padded with
/// `w − 1` zero columns on both sides, so the output has `s + w − 1` columns.
pub fn wide_conv_forward(input: &Mat, filter: &Mat, bias: &[f64], w: usize) -> Result<Mat> {
    check_conv_shapes(input, filter, bias, w)?;
    let height = input.rows;
    let n_out = input.cols + w - 1;
    let padded = padded_columns(input, w);
    let mut out = Mat::zeros(filter.rows, n_out);
    for o in 0..filter.rows {
        let f_row = filter.row(o);
        for j in 0..n_out {
            let window = &padded[j * height..(j + w) * height];
            out.data[o * n_out + j] = (dot(f_row, window) + bias[o]).tanh();
        }
    }
    Ok(out)
}

/// Gradients of [`wide_conv_forward`].
#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Mat,
    pub filter: Mat,
    pub bias: Vec<f64>,
}

/// Backward pass of [`wide_conv_forward`] given its `output` and the upstream
/// gradient `d_output`.
pub fn wide_conv_backward(
    input: &Mat,
    filter: &Mat,
    output: &Mat,
    d_output: &Mat,
    w: usize,
) -> Result<ConvGrads> {
    if output.shape() != d_output.shape() || output.rows != filter.rows {
        return Err(Error::shape(format!(
            "conv backward: output {}x{}, upstream {}x{}, filter {}x{}",
            output.rows, output.cols, d_output.rows, d_output.cols, filter.rows, filter.cols
        )));
    }
    let height = input.rows;
    let n_out = input.cols + w - 1;
    if output.cols != n_out {
        return Err(Error::shape(format!(
            "conv backward: output width {} but input width {} and w={w}",
            output.cols, input.cols
        )));
    }
    let padded = padded_columns(input, w);
    let mut d_padded = vec![0.0; padded.len()];
    let mut d_filter = Mat::zeros(filter.rows, filter.cols);
    let mut d_bias = vec![0.0; filter.rows];
    for o in 0..filter.rows {
        let f_row = filter.row(o);
        for j in 0..n_out {
            let y = output.data[o * n_out + j];
            let dz = d_output.data[o * n_out + j] * (1.0 - y * y);
            if dz == 0.0 {
                continue;
            }
            d_bias[o] += dz;
            let window = &padded[j * height..(j + w) * height];
            axpy(
                dz,
                window,
                &mut d_filter.data[o * filter.cols..(o + 1) * filter.cols],
            );
            axpy(dz, f_row, &mut d_padded[j * height..(j + w) * height]);
        }
    }
    let mut d_input = Mat::zeros(input.rows, input.cols);
    for c in 0..input.cols {
        let src = &d_padded[(c + w - 1) * height..(c + w) * height];
        for (r, v) in src.iter().enumerate() {
            d_input.data[r * input.cols + c] = *v;
        }
    }
    Ok(ConvGrads {
        input: d_input,
        filter: d_filter,
        bias: d_bias,
    })
}

fn check_conv_shapes(input: &Mat, filter: &Mat, bias: &[f64], w: usize) -> Result<()> {
    if w < 1 {
        return Err(Error::shape("convolution window must be at least 1"));
    }
    if input.rows == 0 || input.cols == 0 {
        return Err(Error::shape("convolution input is empty"));
    }
    if filter.cols != input.rows * w {
        return Err(Error::shape(format!(
            "filter has {} columns but input stack height {} with w={w} needs {}",
            filter.cols,
            input.rows,
            input.rows * w
        )));
    }
    if bias.len() != filter.rows {
        return Err(Error::shape(format!(
            "bias length {} does not match {} filters",
            bias.len(),
            filter.rows
        )));
    }
    Ok(())
}

/// Column-major copy of `input` with `w − 1` zero columns on each side.
fn padded_columns(input: &Mat, w: usize) -> Vec<f64> {
    let height = input.rows;
    let total = input.cols + 2 * (w - 1);
    let mut buf = vec![0.0; total * height];
    for r in 0..height {
        for (c, v) in input.row(r).iter().enumerate() {
            buf[(c + w - 1) * height + r] = *v;
        }
    }
    buf
}

/// Column-wise averaging over `w` consecutive columns (`w-ap`).
pub fn avg_pool_window(m: &Mat, w: usize) -> Result<Mat> {
    let uniform = vec![1.0 / w as f64; m.cols];
    weighted_pool_window(m, &uniform, w)
}

pub fn avg_pool_window_backward(m: &Mat, d_out: &Mat, w: usize) -> Result<Mat> {
    let uniform = vec![1.0 / w as f64; m.cols];
    Ok(weighted_pool_window_backward(m, &uniform, d_out, w)?.0)
}

/// `out[:, j] = Σ_{k=j}^{j+w−1} weights[k] · m[:, k]`, an unnormalized
/// weighted window sum.
pub fn weighted_pool_window(m: &Mat, weights: &[f64], w: usize) -> Result<Mat> {
    check_pool_shapes(m, weights, w)?;
    let n_out = m.cols + 1 - w;
    let mut out = Mat::zeros(m.rows, n_out);
    for r in 0..m.rows {
        let src = m.row(r);
        let dst = &mut out.data[r * n_out..(r + 1) * n_out];
        for (j, d) in dst.iter_mut().enumerate() {
            *d = (j..j + w).map(|k| weights[k] * src[k]).sum();
        }
    }
    Ok(out)
}

/// Returns `(d_m, d_weights)`.
pub fn weighted_pool_window_backward(
    m: &Mat,
    weights: &[f64],
    d_out: &Mat,
    w: usize,
) -> Result<(Mat, Vec<f64>)> {
    check_pool_shapes(m, weights, w)?;
    let n_out = m.cols + 1 - w;
    if d_out.shape() != (m.rows, n_out) {
        return Err(Error::shape(format!(
            "pool backward: upstream {}x{}, expected {}x{n_out}",
            d_out.rows, d_out.cols, m.rows
        )));
    }
    let mut d_m = Mat::zeros(m.rows, m.cols);
    let mut d_weights = vec![0.0; m.cols];
    for r in 0..m.rows {
        let src = m.row(r);
        let up = d_out.row(r);
        let dst = &mut d_m.data[r * m.cols..(r + 1) * m.cols];
        for (j, &g) in up.iter().enumerate() {
            for k in j..j + w {
                dst[k] += weights[k] * g;
                d_weights[k] += src[k] * g;
            }
        }
    }
    Ok((d_m, d_weights))
}

fn check_pool_shapes(m: &Mat, weights: &[f64], w: usize) -> Result<()> {
    if w < 1 || w > m.cols {
        return Err(Error::shape(format!(
            "pooling window {w} does not fit {} columns",
            m.cols
        )));
    }
    if weights.len() != m.cols {
        return Err(Error::shape(format!(
            "{} pooling weights for {} columns",
            weights.len(),
            m.cols
        )));
    }
    Ok(())
}

/// Column-wise average over all columns (`all-ap`); one value per row.
pub fn avg_pool_all(m: &Mat) -> Result<Vec<f64>> {
    if m.rows == 0 || m.cols == 0 {
        return Err(Error::shape("all-ap over an empty matrix"));
    }
    let n = m.cols as f64;
    Ok((0..m.rows).map(|r| m.row(r).iter().sum::<f64>() / n).collect())
}

pub fn avg_pool_all_backward(rows: usize, cols: usize, d_out: &[f64]) -> Mat {
    let mut d_m = Mat::zeros(rows, cols);
    let inv = 1.0 / cols as f64;
    for (r, g) in d_out.iter().enumerate() {
        d_m.data[r * cols..(r + 1) * cols].fill(g * inv);
    }
    d_m
}

/// Central-difference gradient of `f` at `x`.
pub fn finite_diff_gradient<F>(mut f: F, x: &Mat, eps: f64) -> Result<Mat>
where
    F: FnMut(&Mat) -> f64,
{
    if !(eps > 0.0) {
        return Err(Error::Argument(format!("epsilon must be positive, got {eps}")));
    }
    let mut probe = x.clone();
    let mut grad = Mat::zeros(x.rows, x.cols);
    for i in 0..x.data.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let plus = f(&probe);
        probe.data[i] = orig - eps;
        let minus = f(&probe);
        probe.data[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "function is not finite around entry {i}"
            )));
        }
        grad.data[i] = (plus - minus) / (2.0 * eps);
    }
    Ok(grad)
}

/// `max|a − b| / max(1, ‖a‖∞, ‖b‖∞)`.
pub fn relative_error(analytic: &Mat, numeric: &Mat) -> f64 {
    let diff = analytic
        .data
        .iter()
        .zip(&numeric.data)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    diff / 1f64.max(analytic.max_abs()).max(numeric.max_abs())
}
