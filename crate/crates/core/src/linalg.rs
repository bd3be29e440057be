//! Dense linear algebra and convolution primitives.
//!
//! [`Matrix`] is row-major: entry `(r, c)` lives at `data[r * cols + c]`.
//! [`Tensor4`] is NHWC: `(b, y, x, c)` lives at
//! `data[((b * height + y) * width + x) * channels + c]`, so a batch of images
//! is bit-for-bit a `batch × (height·width·channels)` matrix.
//!
//! Filters are vectorized in the same order (height, then width, then
//! channel, channel fastest). A [`FilterBank`] stores one filter per column
//! of an `n_v × n_filters` matrix, which is exactly the shape of a predicted
//! weight matrix `U_α W_α`.

use std::fmt;

use base64::Engine;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 64 {
            let rows: Vec<&[f64]> = (0..self.rows).map(|r| self.row(r)).collect();
            f.debug_struct("Matrix")
                .field("rows", &self.rows)
                .field("cols", &self.cols)
                .field("data", &rows)
                .finish()
        } else {
            f.debug_struct("Matrix")
                .field("rows", &self.rows)
                .field("cols", &self.cols)
                .finish_non_exhaustive()
        }
    }
}

impl Matrix {
    /// Builds a matrix from row-major data.
    ///
    /// Zero-row matrices are allowed (an empty batch); the column count must
    /// be at least one and every entry finite.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if cols == 0 {
            return Err(Error::shape("Matrix::new", "column count must be >= 1"));
        }
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::new",
                format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Matrix::new"));
        }
        Ok(Self { rows, cols, data })
    }

    pub(crate) fn from_parts(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("Matrix::from_rows", "ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(cols >= 1, "matrix needs at least one column");
        Self::from_parts(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m.data[r * cols + c] = f(r, c);
            }
        }
        m
    }

    /// iid Gaussian entries with the given standard deviation.
    pub fn random_normal<R: Rng + ?Sized>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self::from_parts(rows, cols, data)
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the raw row-major buffer. Callers are responsible for
    /// keeping entries finite.
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        matmul(self, other)
    }

    pub fn select_rows(&self, indices: &[usize]) -> Result<Matrix> {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(Error::Index { index: i, size: self.rows });
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Matrix::from_parts(indices.len(), self.cols, data))
    }

    pub fn select_cols(&self, indices: &[usize]) -> Result<Matrix> {
        if indices.is_empty() {
            return Err(Error::shape("select_cols", "no columns selected"));
        }
        if let Some(&bad) = indices.iter().find(|&&c| c >= self.cols) {
            return Err(Error::Index { index: bad, size: self.cols });
        }
        let mut out = Matrix::zeros(self.rows, indices.len());
        for r in 0..self.rows {
            let src = self.row(r);
            for (k, &c) in indices.iter().enumerate() {
                out.data[r * indices.len() + k] = src[c];
            }
        }
        Ok(out)
    }

    /// Columns `start..start + len` as a new matrix.
    pub fn col_block(&self, start: usize, len: usize) -> Matrix {
        assert!(start + len <= self.cols && len > 0);
        let mut out = Matrix::zeros(self.rows, len);
        for r in 0..self.rows {
            out.row_mut(r)
                .copy_from_slice(&self.row(r)[start..start + len]);
        }
        out
    }

    /// Writes `block` into columns `start..start + block.cols()`.
    pub fn set_col_block(&mut self, start: usize, block: &Matrix) {
        assert_eq!(block.rows, self.rows);
        assert!(start + block.cols <= self.cols);
        let w = block.cols;
        for r in 0..self.rows {
            self.row_mut(r)[start..start + w].copy_from_slice(block.row(r));
        }
    }

    /// Horizontal concatenation `[b_1, …, b_J]`.
    pub fn hcat(blocks: &[Matrix]) -> Result<Matrix> {
        let first = blocks
            .first()
            .ok_or_else(|| Error::shape("hcat", "no blocks"))?;
        if blocks.iter().any(|b| b.rows != first.rows) {
            return Err(Error::shape("hcat", "blocks differ in row count"));
        }
        let cols = blocks.iter().map(|b| b.cols).sum();
        let mut out = Matrix::zeros(first.rows, cols);
        let mut at = 0;
        for b in blocks {
            out.set_col_block(at, b);
            at += b.cols;
        }
        Ok(out)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    fn zip_with(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        finite(Matrix::from_parts(self.rows, self.cols, data), op)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix::from_parts(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    /// `self += s · other`.
    pub fn axpy(&mut self, s: f64, other: &Matrix) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    /// Adds `v` to every row.
    pub fn add_row_vector(&mut self, v: &[f64]) {
        assert_eq!(v.len(), self.cols);
        for row in self.data.chunks_exact_mut(self.cols) {
            for (a, b) in row.iter_mut().zip(v) {
                *a += b;
            }
        }
    }

    /// Sum over rows, one value per column.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.cols];
        for row in self.data.chunks_exact(self.cols) {
            for (a, b) in s.iter_mut().zip(row) {
                *a += b;
            }
        }
        s
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `‖self − other‖_∞` over entries.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn finite(m: Matrix, op: &'static str) -> Result<Matrix> {
    if m.is_finite() {
        Ok(m)
    } else {
        Err(Error::NonFinite(op))
    }
}

#[derive(Serialize, Deserialize)]
struct MatrixRepr {
    rows: usize,
    cols: usize,
    /// Little-endian f64 bytes, base64 encoded; exact round trip.
    data: String,
}

impl Serialize for Matrix {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut bytes = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        MatrixRepr {
            rows: self.rows,
            cols: self.cols,
            data: base64::engine::general_purpose::STANDARD.encode(bytes),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Matrix {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let repr = MatrixRepr::deserialize(d)?;
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(repr.data.as_bytes())
            .map_err(D::Error::custom)?;
        if bytes.len() % 8 != 0 {
            return Err(D::Error::custom("matrix payload is not a whole number of f64s"));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Matrix::new(repr.rows, repr.cols, data).map_err(D::Error::custom)
    }
}

/// Which operand is transposed in a [`gemm_into`] call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Trans {
    N,
    T,
}

/// `c = alpha · op(a) · op(b) + beta · c` on row-major buffers.
pub(crate) fn gemm_into(alpha: f64, a: &Matrix, ta: Trans, b: &Matrix, tb: Trans, beta: f64, c: &mut Matrix) {
    let (m, k, rsa, csa) = match ta {
        Trans::N => (a.rows, a.cols, a.cols as isize, 1),
        Trans::T => (a.cols, a.rows, 1, a.cols as isize),
    };
    let (kb, n, rsb, csb) = match tb {
        Trans::N => (b.rows, b.cols, b.cols as isize, 1),
        Trans::T => (b.cols, b.rows, 1, b.cols as isize),
    };
    assert_eq!(k, kb, "inner dimensions");
    assert_eq!((c.rows, c.cols), (m, n), "output shape");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c.data {
            *v *= beta;
        }
        return;
    }
    // SAFETY: the strides and extents above describe exactly the buffers of
    // `a`, `b` and `c`, which are live and do not alias (`c` is `&mut`).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

pub(crate) fn gemm(a: &Matrix, ta: Trans, b: &Matrix, tb: Trans) -> Matrix {
    let m = if ta == Trans::N { a.rows } else { a.cols };
    let n = if tb == Trans::N { b.cols } else { b.rows };
    let mut c = Matrix::zeros(m, n.max(1));
    gemm_into(1.0, a, ta, b, tb, 0.0, &mut c);
    c
}

/// Standard matrix product `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape(
            "matmul",
            format!("{}x{} · {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    finite(gemm(a, Trans::N, b, Trans::N), "matmul")
}

/// `aᵀ · b`.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::shape(
            "matmul_tn",
            format!("({}x{})ᵀ · {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    finite(gemm(a, Trans::T, b, Trans::N), "matmul_tn")
}

/// `a · bᵀ`.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::shape(
            "matmul_nt",
            format!("{}x{} · ({}x{})ᵀ", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    finite(gemm(a, Trans::N, b, Trans::T), "matmul_nt")
}

/// Lower-triangular Cholesky factor `L` with `k = L Lᵀ`.
#[derive(Clone, Debug)]
pub struct Cholesky {
    l: Matrix,
}

impl Cholesky {
    /// Factors a symmetric positive definite matrix. Only the lower triangle
    /// of `k` is read.
    pub fn factor(k: &Matrix) -> Result<Self> {
        let n = k.rows;
        if n == 0 || k.cols != n {
            return Err(Error::shape("cholesky", format!("{}x{} is not square", k.rows, k.cols)));
        }
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let lj = &l.data[j * n..j * n + j];
            let d = k.get(j, j) - lj.iter().map(|v| v * v).sum::<f64>();
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::NotPositiveDefinite { index: j, pivot: d });
            }
            let djj = d.sqrt();
            l.data[j * n + j] = djj;
            for i in j + 1..n {
                let (head, tail) = l.data.split_at(i * n);
                let li = &tail[..j];
                let lj = &head[j * n..j * n + j];
                let s: f64 = li.iter().zip(lj).map(|(a, b)| a * b).sum();
                l.data[i * n + j] = (k.get(i, j) - s) / djj;
            }
        }
        Ok(Self { l })
    }

    pub fn lower(&self) -> &Matrix {
        &self.l
    }

    pub fn min_pivot(&self) -> f64 {
        let n = self.l.rows;
        (0..n).map(|i| self.l.get(i, i)).fold(f64::INFINITY, f64::min)
    }

    /// Solves `L Lᵀ x = b` for every column of `b`.
    pub fn solve(&self, b: &Matrix) -> Result<Matrix> {
        let n = self.l.rows;
        if b.rows != n {
            return Err(Error::shape("cholesky solve", format!("rhs has {} rows, need {n}", b.rows)));
        }
        let m = b.cols;
        let mut y = b.clone();
        // Forward: L y = b, row by row.
        for i in 0..n {
            let (done, rest) = y.data.split_at_mut(i * m);
            let yi = &mut rest[..m];
            for k in 0..i {
                let lik = self.l.data[i * n + k];
                if lik != 0.0 {
                    for (a, b) in yi.iter_mut().zip(&done[k * m..(k + 1) * m]) {
                        *a -= lik * b;
                    }
                }
            }
            let d = self.l.data[i * n + i];
            yi.iter_mut().for_each(|v| *v /= d);
        }
        // Backward: Lᵀ x = y.
        for i in (0..n).rev() {
            let (head, tail) = y.data.split_at_mut((i + 1) * m);
            let xi = &mut head[i * m..];
            for k in i + 1..n {
                let lki = self.l.data[k * n + i];
                if lki != 0.0 {
                    let off = (k - i - 1) * m;
                    for (a, b) in xi.iter_mut().zip(&tail[off..off + m]) {
                        *a -= lki * b;
                    }
                }
            }
            let d = self.l.data[i * n + i];
            xi.iter_mut().for_each(|v| *v /= d);
        }
        finite(y, "cholesky solve")
    }
}

/// Solves `k · x = b` for symmetric positive definite `k` by Cholesky
/// factorization.
pub fn solve_spd(k: &Matrix, b: &Matrix) -> Result<Matrix> {
    Cholesky::factor(k)?.solve(b)
}

/// Batch of images in NHWC layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor4 {
    batch: usize,
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn new(batch: usize, height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::shape("Tensor4::new", "zero spatial or channel extent"));
        }
        if data.len() != batch * height * width * channels {
            return Err(Error::shape(
                "Tensor4::new",
                format!(
                    "{batch}x{height}x{width}x{channels} needs {} values, got {}",
                    batch * height * width * channels,
                    data.len()
                ),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Tensor4::new"));
        }
        Ok(Self {
            batch,
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(batch: usize, height: usize, width: usize, channels: usize) -> Self {
        Self {
            batch,
            height,
            width,
            channels,
            data: vec![0.0; batch * height * width * channels],
        }
    }

    /// Reinterprets a `batch × (h·w·c)` matrix as NHWC images.
    pub fn from_matrix(m: Matrix, height: usize, width: usize, channels: usize) -> Result<Self> {
        if m.cols != height * width * channels {
            return Err(Error::shape(
                "Tensor4::from_matrix",
                format!("{} columns cannot hold {height}x{width}x{channels}", m.cols),
            ));
        }
        Ok(Self {
            batch: m.rows,
            height,
            width,
            channels,
            data: m.data,
        })
    }

    pub fn into_matrix(self) -> Matrix {
        let cols = self.height * self.width * self.channels;
        Matrix::from_parts(self.batch, cols, self.data)
    }

    pub fn as_matrix(&self) -> Matrix {
        self.clone().into_matrix()
    }

    pub fn batch(&self) -> usize {
        self.batch
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
    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, b: usize, y: usize, x: usize, c: usize) -> f64 {
        self.data[((b * self.height + y) * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, b: usize, y: usize, x: usize, c: usize, v: f64) {
        self.data[((b * self.height + y) * self.width + x) * self.channels + c] = v;
    }

    pub fn image(&self, b: usize) -> &[f64] {
        let n = self.image_len();
        &self.data[b * n..(b + 1) * n]
    }

    /// Images at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Tensor4 {
        let n = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        Tensor4 {
            batch: indices.len(),
            height: self.height,
            width: self.width,
            channels: self.channels,
            data,
        }
    }

    pub fn add(&self, other: &Tensor4) -> Result<Tensor4> {
        if self.dims() != other.dims() {
            return Err(Error::shape("Tensor4::add", "dimension mismatch"));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Tensor4 { data, ..*self })
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.batch, self.height, self.width, self.channels)
    }

    pub fn max_abs_diff(&self, other: &Tensor4) -> f64 {
        assert_eq!(self.dims(), other.dims());
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// A bank of `n_filters` filters of extent `height × width × channels`,
/// stored as the columns of an `(h·w·c) × n_filters` matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterBank {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub weights: Matrix,
}

impl FilterBank {
    pub fn new(height: usize, width: usize, channels: usize, weights: Matrix) -> Result<Self> {
        if weights.rows != height * width * channels {
            return Err(Error::shape(
                "FilterBank::new",
                format!(
                    "{} rows cannot hold {height}x{width}x{channels} filters",
                    weights.rows
                ),
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            weights,
        })
    }

    pub fn n_filters(&self) -> usize {
        self.weights.cols
    }

    /// Weight of filter `f` at `(y, x, c)`.
    pub fn tap(&self, f: usize, y: usize, x: usize, c: usize) -> f64 {
        self.weights.get((y * self.width + x) * self.channels + c, f)
    }
}

/// Shape bookkeeping for a valid, strided cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub in_height: usize,
    pub in_width: usize,
    pub in_channels: usize,
    pub filter_height: usize,
    pub filter_width: usize,
    pub stride: usize,
}

impl ConvGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::shape("conv", "stride must be >= 1"));
        }
        if self.filter_height == 0 || self.filter_width == 0 || self.in_channels == 0 {
            return Err(Error::shape("conv", "empty filter"));
        }
        if self.filter_height > self.in_height || self.filter_width > self.in_width {
            return Err(Error::shape(
                "conv",
                format!(
                    "filter {}x{} exceeds input {}x{}",
                    self.filter_height, self.filter_width, self.in_height, self.in_width
                ),
            ));
        }
        Ok(())
    }

    pub fn out_height(&self) -> usize {
        (self.in_height - self.filter_height) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.in_width - self.filter_width) / self.stride + 1
    }

    pub fn positions(&self) -> usize {
        self.out_height() * self.out_width()
    }

    pub fn patch_len(&self) -> usize {
        self.filter_height * self.filter_width * self.in_channels
    }

    pub fn input_len(&self) -> usize {
        self.in_height * self.in_width * self.in_channels
    }
}

/// Unrolls every filter-sized window of each image into one row, in the
/// module-wide (height, width, channel) order. Rows are ordered
/// `(image, out_y, out_x)`, so `im2col(x) · W` is directly an NHWC output.
pub(crate) fn im2col(images: &[f64], batch: usize, g: &ConvGeometry) -> Matrix {
    let (oh, ow) = (g.out_height(), g.out_width());
    let run = g.filter_width * g.in_channels;
    let row_stride = g.in_width * g.in_channels;
    let img_len = g.input_len();
    let plen = g.patch_len();
    let mut out = vec![0.0; batch * oh * ow * plen];
    let mut dst = 0;
    for b in 0..batch {
        let img = &images[b * img_len..(b + 1) * img_len];
        for oy in 0..oh {
            for ox in 0..ow {
                let base = (oy * g.stride) * row_stride + ox * g.stride * g.in_channels;
                for ky in 0..g.filter_height {
                    let s = base + ky * row_stride;
                    out[dst..dst + run].copy_from_slice(&img[s..s + run]);
                    dst += run;
                }
            }
        }
    }
    Matrix::from_parts(batch * oh * ow, plen, out)
}

/// Adjoint of [`im2col`]: scatters patch rows back onto images, summing
/// overlaps.
pub(crate) fn col2im(cols: &Matrix, batch: usize, g: &ConvGeometry) -> Matrix {
    let (oh, ow) = (g.out_height(), g.out_width());
    let run = g.filter_width * g.in_channels;
    let row_stride = g.in_width * g.in_channels;
    let img_len = g.input_len();
    let mut out = vec![0.0; batch * img_len];
    let src = cols.as_slice();
    let mut at = 0;
    for b in 0..batch {
        let img = &mut out[b * img_len..(b + 1) * img_len];
        for oy in 0..oh {
            for ox in 0..ow {
                let base = (oy * g.stride) * row_stride + ox * g.stride * g.in_channels;
                for ky in 0..g.filter_height {
                    let s = base + ky * row_stride;
                    for (d, v) in img[s..s + run].iter_mut().zip(&src[at..at + run]) {
                        *d += v;
                    }
                    at += run;
                }
            }
        }
    }
    Matrix::from_parts(batch, img_len, out)
}

/// Valid (unpadded) strided cross-correlation of `input` with every filter
/// of `filters`. Output channel `f` is the response to filter `f`.
pub fn correlate2d(input: &Tensor4, filters: &FilterBank, stride: usize) -> Result<Tensor4> {
    if filters.channels != input.channels {
        return Err(Error::shape(
            "correlate2d",
            format!(
                "filters have {} channels, input has {}",
                filters.channels, input.channels
            ),
        ));
    }
    let g = ConvGeometry {
        in_height: input.height,
        in_width: input.width,
        in_channels: input.channels,
        filter_height: filters.height,
        filter_width: filters.width,
        stride,
    };
    g.validate()?;
    let cols = im2col(&input.data, input.batch, &g);
    let out = finite(gemm(&cols, Trans::N, &filters.weights, Trans::N), "correlate2d")?;
    Ok(Tensor4 {
        batch: input.batch,
        height: g.out_height(),
        width: g.out_width(),
        channels: filters.n_filters(),
        data: out.data,
    })
}
