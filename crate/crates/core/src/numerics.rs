//! Dense row-major linear algebra and numerically stable probability kernels.
//!
//! Everything here is `f64`. The mixture energy and the finite-difference
//! gradient checks both depend on log-determinants and small differences
//! that do not survive single precision.

use crate::error::{dim_err, Error, Result};

/// Dense row-major matrix of finite `f64` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting wrong lengths and non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(dim_err(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "matrix entry ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Internal constructor for values produced by trusted arithmetic.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_raw(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::from_raw(rows, cols, data)
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(dim_err("ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
    }

    /// A single-row matrix holding `values`.
    pub fn row_vector(values: Vec<f64>) -> Self {
        let n = values.len();
        Self::from_raw(1, n, values)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Copies the rows listed in `idx`, in that order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix::from_raw(idx.len(), self.cols, data)
    }

    /// Horizontal concatenation `[self | other]`.
    pub fn hstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(dim_err(format!(
                "hstack of {} and {} rows",
                self.rows, other.rows
            )));
        }
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for i in 0..self.rows {
            data.extend_from_slice(self.row(i));
            data.extend_from_slice(other.row(i));
        }
        Ok(Matrix::from_raw(self.rows, cols, data))
    }

    /// Column range `[start, end)` as a new matrix.
    pub fn columns(&self, start: usize, end: usize) -> Matrix {
        let cols = end - start;
        let mut data = Vec::with_capacity(self.rows * cols);
        for i in 0..self.rows {
            data.extend_from_slice(&self.row(i)[start..end]);
        }
        Matrix::from_raw(self.rows, cols, data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix::from_raw(self.rows, self.cols, self.data.iter().map(|v| v * s).collect())
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(dim_err(format!(
                "subtracting {:?} from {:?}",
                other.shape(),
                self.shape()
            )));
        }
        Ok(Matrix::from_raw(
            self.rows,
            self.cols,
            self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        ))
    }

    /// In-place `self += s * other`.
    pub fn axpy(&mut self, s: f64, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        if self.rows != self.cols {
            return false;
        }
        let scale = self.data.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                if (self.get(i, j) - self.get(j, i)).abs() > tol * scale {
                    return false;
                }
            }
        }
        true
    }

    /// `self · v` for a column vector `v`.
    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(dim_err(format!(
                "{}x{} matrix times vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Standard matrix product `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(dim_err(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (o, &bkj) in out_row.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(dim_err(format!(
            "cannot multiply {}x{} by transpose of {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
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

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(dim_err(format!(
            "cannot multiply transpose of {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.cols, b.cols);
    for r in 0..a.rows {
        let br = b.row(r);
        for (i, &ari) in a.row(r).iter().enumerate() {
            if ari == 0.0 {
                continue;
            }
            let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &v) in out_row.iter_mut().zip(br) {
                *o += ari * v;
            }
        }
    }
    Ok(out)
}

/// Lower-triangular Cholesky factor `L` with `L·Lᵀ = m + jitter·I`.
#[derive(Clone, Debug)]
pub struct CholeskyFactor {
    lower: Matrix,
    log_det: f64,
    jitter: f64,
    failed_attempts: usize,
}

pub const JITTER_START: f64 = 1e-6;
pub const JITTER_MAX: f64 = 1e-2;

impl CholeskyFactor {
    pub fn lower(&self) -> &Matrix {
        &self.lower
    }

    /// `log |m + jitter·I|`.
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// Jitter actually added to the diagonal.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Number of factorization attempts that failed before this one succeeded.
    pub fn failed_attempts(&self) -> usize {
        self.failed_attempts
    }

    pub fn dim(&self) -> usize {
        self.lower.rows
    }

    /// Forward substitution `L y = b`.
    pub fn solve_lower(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let mut y = vec![0.0; n];
        for i in 0..n {
            let row = self.lower.row(i);
            let s: f64 = dot(&row[..i], &y[..i]);
            y[i] = (b[i] - s) / row[i];
        }
        y
    }

    /// Solves `(L Lᵀ) x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let mut x = self.solve_lower(b);
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in (i + 1)..n {
                s -= self.lower.get(k, i) * x[k];
            }
            x[i] = s / self.lower.get(i, i);
        }
        x
    }

    /// `bᵀ (L Lᵀ)⁻¹ b`.
    pub fn quad_form(&self, b: &[f64]) -> f64 {
        let y = self.solve_lower(b);
        dot(&y, &y)
    }

    pub fn inverse(&self) -> Matrix {
        let n = self.dim();
        let mut inv = Matrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[j] = 1.0;
            let col = self.solve(&e);
            for i in 0..n {
                inv.set(i, j, col[i]);
            }
        }
        // exact symmetry
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 0.5 * (inv.get(i, j) + inv.get(j, i));
                inv.set(i, j, v);
                inv.set(j, i, v);
            }
        }
        inv
    }

    /// Reconstructs `L·Lᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        matmul_nt(&self.lower, &self.lower).expect("square factor")
    }
}

/// Smallest accepted pivot relative to the largest diagonal entry. A
/// numerically singular matrix leaves pivots at rounding level, which may
/// land on either side of zero; rejecting them sends every such matrix to the
/// same jitter rung, so the factorization stays a smooth function of `m`.
pub const PIVOT_REL_TOL: f64 = 1e-12;

fn try_cholesky(m: &Matrix, jitter: f64) -> Option<Matrix> {
    let n = m.rows;
    let mut l = Matrix::zeros(n, n);
    let scale = (0..n).map(|i| m.get(i, i).abs()).fold(0.0, f64::max) + jitter;
    let min_pivot = PIVOT_REL_TOL * scale;
    for j in 0..n {
        let lj = l.row(j)[..j].to_vec();
        let d = m.get(j, j) + jitter - dot(&lj, &lj);
        if !(d > min_pivot) || !d.is_finite() {
            return None;
        }
        let ljj = d.sqrt();
        l.set(j, j, ljj);
        for i in (j + 1)..n {
            let s = m.get(i, j) - dot(&l.row(i)[..j], &lj);
            l.set(i, j, s / ljj);
        }
    }
    Some(l)
}

/// Factors `m + jitter·I`, escalating the jitter ×10 (starting at 1e-6) until
/// it succeeds or exceeds 1e-2.
pub fn cholesky(m: &Matrix, jitter: f64) -> Result<CholeskyFactor> {
    if m.rows != m.cols {
        return Err(dim_err(format!(
            "cholesky of non-square {}x{} matrix",
            m.rows, m.cols
        )));
    }
    if !m.is_symmetric(1e-9) {
        return Err(Error::InvalidArgument(
            "cholesky input is not symmetric".into(),
        ));
    }
    if jitter < 0.0 || !jitter.is_finite() {
        return Err(Error::InvalidArgument(format!("jitter {jitter} is invalid")));
    }
    let mut current = jitter;
    let mut failed = 0;
    loop {
        if let Some(lower) = try_cholesky(m, current) {
            let log_det = 2.0 * (0..m.rows).map(|i| lower.get(i, i).ln()).sum::<f64>();
            return Ok(CholeskyFactor {
                lower,
                log_det,
                jitter: current,
                failed_attempts: failed,
            });
        }
        failed += 1;
        let next = if current < JITTER_START {
            JITTER_START
        } else {
            current * 10.0
        };
        if next > JITTER_MAX * (1.0 + 1e-9) {
            return Err(Error::NotPositiveDefinite { jitter: current });
        }
        current = next;
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(p: &[f64]) -> Result<Vec<f64>> {
    if p.is_empty() {
        return Err(Error::InvalidArgument("softmax of empty vector".into()));
    }
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let mut out = vec![0.0; p.len()];
    softmax_into(p, &mut out);
    Ok(out)
}

/// Softmax of finite `p` written into `out`; no validation.
pub(crate) fn softmax_into(p: &[f64], out: &mut [f64]) {
    let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(p) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// `log Σ exp(v_i)` computed without overflow.
pub fn log_sum_exp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::InvalidArgument("log-sum-exp of empty vector".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("log-sum-exp input".into()));
    }
    Ok(lse_unchecked(v))
}

pub(crate) fn lse_unchecked(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Largest eigenvalue modulus of a square matrix, from a real Schur decomposition.
pub fn spectral_radius(m: &Matrix) -> Result<f64> {
    if m.rows != m.cols {
        return Err(dim_err("spectral radius of non-square matrix"));
    }
    let na = nalgebra::DMatrix::from_row_slice(m.rows, m.cols, &m.data);
    let eig = na.complex_eigenvalues();
    Ok(eig.iter().map(|c| c.norm()).fold(0.0, f64::max))
}

/// Power-iteration estimate of the spectral radius: the geometric-mean growth
/// rate of `‖Aᵏx‖` over the last half of `iters` iterations.
///
/// Converges slowly when the dominant eigenvalues form a complex pair or are
/// nearly tied in modulus, so it is a coarse cross-check only.
pub fn power_iteration_radius(m: &Matrix, iters: usize, start: &[f64]) -> Result<f64> {
    if m.rows != m.cols || start.len() != m.rows {
        return Err(dim_err("power iteration shape"));
    }
    let mut x = start.to_vec();
    let n0 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n0 == 0.0 {
        return Err(Error::InvalidArgument("zero start vector".into()));
    }
    x.iter_mut().for_each(|v| *v /= n0);
    let burn = iters / 2;
    let mut log_growth = 0.0;
    for it in 0..iters {
        let y = m.mul_vec(&x)?;
        let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Ok(0.0);
        }
        if it >= burn {
            log_growth += norm.ln();
        }
        x = y.into_iter().map(|v| v / norm).collect();
    }
    Ok((log_growth / (iters - burn) as f64).exp())
}
