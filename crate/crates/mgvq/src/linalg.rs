//! Dense row-major linear algebra: matrices, permutations, unit-diagonal LDL
//! factorization, triangular solves, and the Kronecker-factored quadratic form
//! used as the curvature-weighted quantization loss.
//!
//! Everything is `f64` internally and all reductions run in a fixed sequential
//! row-major order so results are bitwise reproducible.

use std::fmt;

/// Error type for linear algebra operations.
#[derive(Debug, Clone, PartialEq)]
pub enum LinalgError {
    /// Dimensions do not conform for the operation.
    DimensionMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    /// Data length does not match `rows * cols`.
    InvalidData { expected: usize, got: usize },
    /// A matrix entry is NaN or infinite.
    NonFinite { row: usize, col: usize },
    /// Matrix must be square for this operation.
    NotSquare { rows: usize, cols: usize },
    /// Symmetry tolerance violated.
    NonSymmetric { row: usize, col: usize },
    /// A pivot stayed at or below the threshold after damping.
    SingularAfterDamping { pivot: usize, value: f64 },
    /// Explicit Kronecker materialization would exceed the size guard.
    TooLarge { elements: usize, limit: usize },
    /// Index sequence is not a permutation of 0..size.
    InvalidPermutation,
}

impl fmt::Display for LinalgError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LinalgError::DimensionMismatch { expected, got } => write!(
                f,
                "dimension mismatch: expected {}x{}, got {}x{}",
                expected.0, expected.1, got.0, got.1
            ),
            LinalgError::InvalidData { expected, got } => {
                write!(f, "data length mismatch: expected {expected}, got {got}")
            }
            LinalgError::NonFinite { row, col } => {
                write!(f, "non-finite entry at ({row}, {col})")
            }
            LinalgError::NotSquare { rows, cols } => {
                write!(f, "matrix must be square, got {rows}x{cols}")
            }
            LinalgError::NonSymmetric { row, col } => {
                write!(f, "matrix is not symmetric at ({row}, {col})")
            }
            LinalgError::SingularAfterDamping { pivot, value } => {
                write!(f, "pivot {pivot} is {value:.3e} after damping")
            }
            LinalgError::TooLarge { elements, limit } => {
                write!(f, "kronecker product of {elements} elements exceeds guard {limit}")
            }
            LinalgError::InvalidPermutation => write!(f, "indices are not a permutation"),
        }
    }
}

impl std::error::Error for LinalgError {}

/// Pivot threshold for [`ldl_decompose`]; pivots at or below it after damping
/// surface degenerate curvature instead of being silently clamped.
pub const LDL_PIVOT_MIN: f64 = 1e-12;

/// Relative symmetry tolerance accepted by [`ldl_decompose`].
pub const SYMMETRY_TOL: f64 = 1e-8;

/// Guard on `rows * cols` of the explicit Kronecker oracle.
pub const KRON_GUARD: usize = 4096;

/// Dense real matrix in row-major order: `data[i * cols + j]` holds entry `(i, j)`.
///
/// Zero-sized matrices (0 rows or 0 cols) are permitted and behave vacuously.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Creates a matrix, validating length and that every entry is finite.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(LinalgError::InvalidData {
                expected: rows * cols,
                got: data.len(),
            });
        }
        for (k, &v) in data.iter().enumerate() {
            if !v.is_finite() {
                return Err(LinalgError::NonFinite {
                    row: if cols == 0 { 0 } else { k / cols },
                    col: if cols == 0 { 0 } else { k % cols },
                });
            }
        }
        Ok(Self { rows, cols, data })
    }

    /// Internal constructor for values produced by our own arithmetic.
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

    /// Builds a matrix from row slices. Panics on ragged rows.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self::from_raw(r, c, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
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

    /// `self * other`, sequential row-major accumulation.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix, LinalgError> {
        if self.cols != other.rows {
            return Err(LinalgError::DimensionMismatch {
                expected: (self.cols, other.cols),
                got: (other.rows, other.cols),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let src = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(src) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    /// Matrix-vector product `self * x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>, LinalgError> {
        if x.len() != self.cols {
            return Err(LinalgError::DimensionMismatch {
                expected: (self.cols, 1),
                got: (x.len(), 1),
            });
        }
        let mut out = vec![0.0; self.rows];
        for i in 0..self.rows {
            let mut acc = 0.0;
            for (j, &v) in x.iter().enumerate() {
                acc += self.data[i * self.cols + j] * v;
            }
            out[i] = acc;
        }
        Ok(out)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix, LinalgError> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix, LinalgError> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Matrix {
        Matrix::from_raw(self.rows, self.cols, self.data.iter().map(|v| v * c).collect())
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix, LinalgError> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(LinalgError::DimensionMismatch {
                expected: (self.rows, self.cols),
                got: (other.rows, other.cols),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Matrix::from_raw(self.rows, self.cols, data))
    }

    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn diag_mean(&self) -> f64 {
        if self.rows == 0 {
            return 0.0;
        }
        let mut s = 0.0;
        for i in 0..self.rows.min(self.cols) {
            s += self.data[i * self.cols + i];
        }
        s / self.rows.min(self.cols) as f64
    }
}

/// A bijection on `{0, .., size-1}` used to reorder channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    order: Vec<usize>,
}

impl Permutation {
    pub fn new(order: Vec<usize>) -> Result<Self, LinalgError> {
        let n = order.len();
        let mut seen = vec![false; n];
        for &i in &order {
            if i >= n || seen[i] {
                return Err(LinalgError::InvalidPermutation);
            }
            seen[i] = true;
        }
        Ok(Self { order })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn invert(&self) -> Permutation {
        let mut inv = vec![0usize; self.order.len()];
        for (i, &p) in self.order.iter().enumerate() {
            inv[p] = i;
        }
        Permutation { order: inv }
    }
}

/// Unit-diagonal LDL factors of a damped symmetric matrix:
/// `(L + I) diag(D) (L + I)^T` with `L` strictly lower triangular and `D > 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct LdlFactors {
    l: Matrix,
    d: Vec<f64>,
}

impl LdlFactors {
    pub fn size(&self) -> usize {
        self.d.len()
    }

    /// The strictly lower triangular factor (zero on and above the diagonal).
    pub fn l(&self) -> &Matrix {
        &self.l
    }

    pub fn d(&self) -> &[f64] {
        &self.d
    }

    /// Identity factors of dimension `n`: `L = 0`, `D = 1`.
    pub fn identity(n: usize) -> Self {
        Self {
            l: Matrix::zeros(n, n),
            d: vec![1.0; n],
        }
    }

    /// Test-friendly constructor from explicit parts.
    pub fn from_parts(l: Matrix, d: Vec<f64>) -> Result<Self, LinalgError> {
        if !l.is_square() {
            return Err(LinalgError::NotSquare {
                rows: l.rows(),
                cols: l.cols(),
            });
        }
        if l.rows() != d.len() {
            return Err(LinalgError::DimensionMismatch {
                expected: (l.rows(), 1),
                got: (d.len(), 1),
            });
        }
        for i in 0..l.rows() {
            for j in i..l.cols() {
                if l.get(i, j) != 0.0 {
                    return Err(LinalgError::NonSymmetric { row: i, col: j });
                }
            }
        }
        Ok(Self { l, d })
    }

    /// Rebuilds `(L + I) diag(D) (L + I)^T`.
    pub fn reconstruct(&self) -> Matrix {
        let n = self.size();
        let mut lp = self.l.clone();
        for i in 0..n {
            lp.set(i, i, 1.0);
        }
        let mut ld = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                ld.set(i, j, lp.get(i, j) * self.d[j]);
            }
        }
        ld.matmul(&lp.transpose()).expect("square factors")
    }
}

/// Damping strength applied before factorization: `lambda = scale * mean(diag(H))`.
pub fn damping_lambda(h: &Matrix, damping_scale: f64) -> f64 {
    damping_scale * h.diag_mean()
}

/// `H + lambda*I` with the same lambda [`ldl_decompose`] applies.
pub fn dampen(h: &Matrix, damping_scale: f64) -> Matrix {
    let lambda = damping_lambda(h, damping_scale);
    let mut out = h.clone();
    for i in 0..h.rows().min(h.cols()) {
        let v = out.get(i, i) + lambda;
        out.set(i, i, v);
    }
    out
}

/// Factors `H + lambda*I` as `(L + I) diag(D) (L + I)^T`.
///
/// `H` must be square and symmetric within [`SYMMETRY_TOL`] (relative to the
/// largest entry). Any pivot at or below [`LDL_PIVOT_MIN`] after damping is an
/// error so degenerate calibration data surfaces instead of being clamped.
pub fn ldl_decompose(h: &Matrix, damping_scale: f64) -> Result<LdlFactors, LinalgError> {
    if !h.is_square() {
        return Err(LinalgError::NotSquare {
            rows: h.rows(),
            cols: h.cols(),
        });
    }
    let n = h.rows();
    let tol = SYMMETRY_TOL * h.max_abs().max(1.0);
    for i in 0..n {
        for j in (i + 1)..n {
            if (h.get(i, j) - h.get(j, i)).abs() > tol {
                return Err(LinalgError::NonSymmetric { row: i, col: j });
            }
        }
    }
    let lambda = damping_lambda(h, damping_scale);

    let mut l = Matrix::zeros(n, n);
    let mut d = vec![0.0; n];
    for j in 0..n {
        let mut dj = h.get(j, j) + lambda;
        for k in 0..j {
            dj -= l.get(j, k) * l.get(j, k) * d[k];
        }
        if dj <= LDL_PIVOT_MIN {
            return Err(LinalgError::SingularAfterDamping { pivot: j, value: dj });
        }
        d[j] = dj;
        for i in (j + 1)..n {
            let mut s = h.get(i, j) + if i == j { lambda } else { 0.0 };
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k) * d[k];
            }
            l.set(i, j, s / dj);
        }
    }
    Ok(LdlFactors { l, d })
}

/// Solves `(L + I)^T X = B` by back-substitution.
pub fn tri_solve_unit_upper(factor: &LdlFactors, b: &Matrix) -> Result<Matrix, LinalgError> {
    let n = factor.size();
    if b.rows() != n {
        return Err(LinalgError::DimensionMismatch {
            expected: (n, b.cols()),
            got: (b.rows(), b.cols()),
        });
    }
    let mut x = b.clone();
    let l = &factor.l;
    // (L+I)^T has unit diagonal and entries L[k][i] above it (k > i).
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            let c = l.get(k, i);
            if c == 0.0 {
                continue;
            }
            for j in 0..b.cols() {
                let v = x.get(i, j) - c * x.get(k, j);
                x.set(i, j, v);
            }
        }
    }
    Ok(x)
}

/// Solves `X (L + I) = A` by column back-substitution.
pub fn tri_solve_unit_lower_right(a: &Matrix, factor: &LdlFactors) -> Result<Matrix, LinalgError> {
    let n = factor.size();
    if a.cols() != n {
        return Err(LinalgError::DimensionMismatch {
            expected: (a.rows(), n),
            got: (a.rows(), a.cols()),
        });
    }
    let mut x = a.clone();
    let l = &factor.l;
    for j in (0..n).rev() {
        for k in (j + 1)..n {
            let c = l.get(k, j);
            if c == 0.0 {
                continue;
            }
            for i in 0..a.rows() {
                let v = x.get(i, j) - c * x.get(i, k);
                x.set(i, j, v);
            }
        }
    }
    Ok(x)
}

/// Curvature-weighted quadratic form `trace(E^T H_O E H_I)`.
///
/// Under the row-major vectorization convention this equals
/// `vec(E)^T (H_O kron H_I) vec(E)`; see [`kron_quadratic_oracle`].
pub fn proxy_loss(e: &Matrix, h_o: &Matrix, h_i: &Matrix) -> Result<f64, LinalgError> {
    if h_o.rows() != e.rows() || !h_o.is_square() {
        return Err(LinalgError::DimensionMismatch {
            expected: (e.rows(), e.rows()),
            got: (h_o.rows(), h_o.cols()),
        });
    }
    if h_i.rows() != e.cols() || !h_i.is_square() {
        return Err(LinalgError::DimensionMismatch {
            expected: (e.cols(), e.cols()),
            got: (h_i.rows(), h_i.cols()),
        });
    }
    let he = h_o.matmul(e)?;
    let hehi = he.matmul(h_i)?;
    let mut acc = 0.0;
    for (a, b) in e.data.iter().zip(&hehi.data) {
        acc += a * b;
    }
    Ok(acc)
}

/// Test oracle that materializes `H_O kron H_I` with row-major vec ordering
/// and evaluates the quadratic form directly. Guarded by [`KRON_GUARD`].
pub fn kron_quadratic_oracle(e: &Matrix, h_o: &Matrix, h_i: &Matrix) -> Result<f64, LinalgError> {
    let m = e.rows();
    let n = e.cols();
    if h_o.rows() != m || h_o.cols() != m {
        return Err(LinalgError::DimensionMismatch {
            expected: (m, m),
            got: (h_o.rows(), h_o.cols()),
        });
    }
    if h_i.rows() != n || h_i.cols() != n {
        return Err(LinalgError::DimensionMismatch {
            expected: (n, n),
            got: (h_i.rows(), h_i.cols()),
        });
    }
    let mn = m * n;
    if mn > KRON_GUARD {
        return Err(LinalgError::TooLarge {
            elements: mn,
            limit: KRON_GUARD,
        });
    }
    // vec index of (i, j) is i*n + j: rows are stacked.
    let mut kron = vec![0.0; mn * mn];
    for i1 in 0..m {
        for j1 in 0..n {
            for i2 in 0..m {
                for j2 in 0..n {
                    kron[(i1 * n + j1) * mn + (i2 * n + j2)] = h_o.get(i1, i2) * h_i.get(j1, j2);
                }
            }
        }
    }
    let v = &e.data;
    let mut acc = 0.0;
    for r in 0..mn {
        let mut row = 0.0;
        for c in 0..mn {
            row += kron[r * mn + c] * v[c];
        }
        acc += v[r] * row;
    }
    Ok(acc)
}

/// Reorders rows and columns: `result[i, j] = w[perm_out[i], perm_in[j]]`.
pub fn apply_permutation(
    w: &Matrix,
    perm_out: &Permutation,
    perm_in: &Permutation,
) -> Result<Matrix, LinalgError> {
    if perm_out.len() != w.rows() || perm_in.len() != w.cols() {
        return Err(LinalgError::DimensionMismatch {
            expected: (w.rows(), w.cols()),
            got: (perm_out.len(), perm_in.len()),
        });
    }
    let mut out = Matrix::zeros(w.rows(), w.cols());
    for (i, &src_i) in perm_out.order.iter().enumerate() {
        for (j, &src_j) in perm_in.order.iter().enumerate() {
            out.data[i * w.cols() + j] = w.data[src_i * w.cols() + src_j];
        }
    }
    Ok(out)
}
