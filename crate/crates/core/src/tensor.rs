//! Dense row-major `f32` kernels.
//!
//! Every reduction runs in a fixed left-to-right order so results are
//! bit-identical across runs and platforms. Transcendentals go through `libm`
//! for the same reason.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Row-major matrix of 32-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "buffer of {} values cannot back a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from nested rows; all rows must share a length.
    pub fn from_rows(rows: &[&[f32]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f32) {
        self.data[i * self.cols + j] = value;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Copies the column block `[start, start + width)`.
    pub fn column_block(&self, start: usize, width: usize) -> Matrix {
        Matrix::from_fn(self.rows, width, |i, j| self.get(i, start + j))
    }

    /// Copies the sub-matrix that drops the first `skip` rows and columns.
    pub fn trailing_block(&self, skip: usize) -> Matrix {
        Matrix::from_fn(self.rows - skip, self.cols - skip, |i, j| {
            self.get(i + skip, j + skip)
        })
    }

    /// Adds `bias` to every row.
    pub fn add_row_vector(&mut self, bias: &[f32]) -> Result<()> {
        if bias.len() != self.cols {
            return Err(Error::Shape(format!(
                "bias of length {} for matrix with {} columns",
                bias.len(),
                self.cols
            )));
        }
        for row in self.data.chunks_exact_mut(self.cols) {
            for (x, b) in row.iter_mut().zip(bias) {
                *x += *b;
            }
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        same_shape("add", self, other)?;
        for (x, y) in self.data.iter_mut().zip(&other.data) {
            *x += *y;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f32) {
        for x in &mut self.data {
            *x *= factor;
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn hstack(parts: &[Matrix]) -> Result<Matrix> {
        let rows = parts.first().map_or(0, |m| m.rows);
        if let Some(bad) = parts.iter().find(|m| m.rows != rows) {
            return Err(Error::Shape(format!(
                "hstack of {}x{} onto {rows} rows",
                bad.rows, bad.cols
            )));
        }
        let cols: usize = parts.iter().map(|m| m.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for m in parts {
                data.extend_from_slice(m.row(i));
            }
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Largest absolute elementwise difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f32> {
        same_shape("max_abs_diff", self, other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0f32, |acc, (a, b)| acc.max((a - b).abs())))
    }
}

fn same_shape(op: &str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{op}: {}x{} vs {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    Ok(())
}

/// `a · b`. Each output element accumulates over the inner index in
/// ascending order.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "matmul: {}x{} times {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0f32; n * m];
    for i in 0..n {
        let a_row = &a.data[i * k..(i + 1) * k];
        let out_row = &mut out[i * m..(i + 1) * m];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b.data[p * m..(p + 1) * m];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * b_pj;
            }
        }
    }
    Ok(Matrix {
        rows: n,
        cols: m,
        data: out,
    })
}

/// `a · bᵀ`, the Gram-style product used for attention scores.
pub fn matmul_transposed(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::Shape(format!(
            "matmul_transposed: {}x{} times ({}x{})ᵀ",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    Ok(Matrix::from_fn(a.rows, b.rows, |i, j| {
        a.row(i)
            .iter()
            .zip(b.row(j))
            .fold(0.0f32, |acc, (x, y)| acc + x * y)
    }))
}

/// Softmax over each row, with per-row maximum subtraction.
pub fn row_softmax(s: &Matrix) -> Matrix {
    let mut out = s.clone();
    for row in out.data.chunks_exact_mut(s.cols.max(1)) {
        softmax_in_place(row);
    }
    out
}

pub fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for x in row.iter_mut() {
        *x = libm::expf(*x - max);
        sum += *x;
    }
    let inv = 1.0 / sum;
    for x in row.iter_mut() {
        *x *= inv;
    }
}

/// Per-row standardization followed by the elementwise affine `gamma`, `beta`.
pub fn layer_norm(x: &Matrix, gamma: &[f32], beta: &[f32], eps: f32) -> Result<Matrix> {
    if gamma.len() != x.cols || beta.len() != x.cols {
        return Err(Error::Shape(format!(
            "layer_norm: gamma {} / beta {} for {} columns",
            gamma.len(),
            beta.len(),
            x.cols
        )));
    }
    if eps.partial_cmp(&0.0) != Some(core::cmp::Ordering::Greater) {
        return Err(Error::Validation(format!(
            "layer_norm eps must be positive, got {eps}"
        )));
    }
    let n = x.cols as f32;
    let mut out = x.clone();
    for row in out.data.chunks_exact_mut(x.cols.max(1)) {
        let mean = row.iter().fold(0.0f32, |a, v| a + v) / n;
        let var = row.iter().fold(0.0f32, |a, v| a + (v - mean) * (v - mean)) / n;
        let inv = 1.0 / libm::sqrtf(var + eps);
        for ((v, g), b) in row.iter_mut().zip(gamma).zip(beta) {
            *v = (*v - mean) * inv * g + b;
        }
    }
    Ok(out)
}

/// Exact GELU, `x · Φ(x)`.
#[inline]
pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + libm::erff(x * core::f32::consts::FRAC_1_SQRT_2))
}

/// Sigmoid approximation of GELU used by the original CLIP towers.
#[inline]
pub fn quick_gelu(x: f32) -> f32 {
    x / (1.0 + libm::expf(-1.702 * x))
}

/// Scales every row to unit L2 norm. Rows with zero norm are left as zeros.
pub fn l2_normalize_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for row in out.data.chunks_exact_mut(x.cols.max(1)) {
        let norm = l2_norm(row);
        if norm > 0.0 {
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
    }
    out
}

pub fn l2_norm(v: &[f32]) -> f32 {
    libm::sqrtf(v.iter().fold(0.0f32, |a, x| a + x * x))
}

/// An `h × w` grid of `channels`-dimensional vectors, stored row-major with
/// channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl FeatureGrid {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "buffer of {} values cannot back a {height}x{width}x{channels} grid",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    /// Views an `(h·w) × c` matrix as an `h × w × c` grid.
    pub fn from_matrix(m: Matrix, height: usize, width: usize) -> Result<Self> {
        if m.rows != height * width {
            return Err(Error::Shape(format!(
                "{} rows do not tile a {height}x{width} grid",
                m.rows
            )));
        }
        let channels = m.cols;
        Self::new(height, width, channels, m.data)
    }

    pub fn into_matrix(self) -> Matrix {
        Matrix {
            rows: self.height * self.width,
            cols: self.channels,
            data: self.data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let at = (y * self.width + x) * self.channels;
        &self.data[at..at + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f32] {
        let at = (y * self.width + x) * self.channels;
        &mut self.data[at..at + self.channels]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }
}

/// Source coordinate and blend weight along one axis (half-pixel centers,
/// clamped at the border).
fn axis_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f32)> {
    let scale = in_len as f32 / out_len as f32;
    (0..out_len)
        .map(|o| {
            let src = ((o as f32 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            let frac = if hi == lo { 0.0 } else { src - lo as f32 };
            (lo, hi, frac)
        })
        .collect()
}

/// Bilinear resampling with the align-corners-false convention. Same-size
/// input is returned unchanged.
pub fn bilinear_resize(grid: &FeatureGrid, out_h: usize, out_w: usize) -> Result<FeatureGrid> {
    if out_h == 0 || out_w == 0 || grid.height == 0 || grid.width == 0 {
        return Err(Error::Shape(format!(
            "bilinear_resize {}x{} -> {out_h}x{out_w}: dimensions must be at least 1",
            grid.height, grid.width
        )));
    }
    if out_h == grid.height && out_w == grid.width {
        return Ok(grid.clone());
    }
    let ys = axis_taps(out_h, grid.height);
    let xs = axis_taps(out_w, grid.width);
    let c = grid.channels;
    let mut out = FeatureGrid::zeros(out_h, out_w, c);
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            let (p00, p01) = (grid.pixel(y0, x0), grid.pixel(y0, x1));
            let (p10, p11) = (grid.pixel(y1, x0), grid.pixel(y1, x1));
            let dst = out.pixel_mut(oy, ox);
            for ch in 0..c {
                let top = p00[ch] + (p01[ch] - p00[ch]) * fx;
                let bottom = p10[ch] + (p11[ch] - p10[ch]) * fx;
                dst[ch] = top + (bottom - top) * fy;
            }
        }
    }
    Ok(out)
}
