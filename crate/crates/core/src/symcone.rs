//! Symmetric matrices, half-vectorization and PSD-cone helpers.
//!
//! `vech` reads the upper triangle column by column, i.e. the entry `(i, j)`
//! with `i <= j` lands at position `j (j + 1) / 2 + i`. Off-diagonal entries
//! are scaled by `sqrt(2)` so that `<vech(Q), vech(X)> = trace(Q X)`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub const SQRT_2: f64 = std::f64::consts::SQRT_2;

/// Length of the half-vectorization of an `n x n` symmetric matrix.
#[inline]
pub fn vech_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Position of entry `(i, j)` (either order) inside `vech`.
#[inline]
pub fn vech_index(i: usize, j: usize) -> usize {
    let (r, c) = if i <= j { (i, j) } else { (j, i) };
    c * (c + 1) / 2 + r
}

/// Inverse of [`vech_index`]: returns `(row, col)` with `row <= col`.
pub fn vech_entry(k: usize) -> (usize, usize) {
    // Largest c with c (c + 1) / 2 <= k.
    let mut c = ((((8 * k + 1) as f64).sqrt() - 1.0) / 2.0) as usize;
    while vech_len(c + 1) <= k {
        c += 1;
    }
    while vech_len(c) > k {
        c -= 1;
    }
    (k - vech_len(c), c)
}

/// Scale applied to entry `(i, j)` by `vech`.
#[inline]
pub fn vech_scale(i: usize, j: usize) -> f64 {
    if i == j {
        1.0
    } else {
        SQRT_2
    }
}

/// Side length `n` such that `n (n + 1) / 2 == len`.
pub fn side_from_vech_len(len: usize) -> Result<usize> {
    let n = ((((8 * len + 1) as f64).sqrt() - 1.0) / 2.0).round() as usize;
    if n == 0 || vech_len(n) != len {
        return Err(Error::InvalidShape(format!(
            "length {len} is not a triangular number n(n+1)/2 with n >= 1"
        )));
    }
    Ok(n)
}

/// Dense real symmetric matrix. Both triangles are always stored and always
/// agree bit for bit.
#[derive(Clone, Debug, PartialEq)]
pub struct SymMat {
    m: DMatrix<f64>,
}

impl SymMat {
    pub fn zeros(n: usize) -> Self {
        assert!(n >= 1, "SymMat dimension must be at least 1");
        Self {
            m: DMatrix::zeros(n, n),
        }
    }

    pub fn identity(n: usize) -> Self {
        assert!(n >= 1, "SymMat dimension must be at least 1");
        Self {
            m: DMatrix::identity(n, n),
        }
    }

    pub fn from_diagonal(d: &[f64]) -> Self {
        let mut s = Self::zeros(d.len());
        for (i, &v) in d.iter().enumerate() {
            s.m[(i, i)] = v;
        }
        s
    }

    /// Symmetrizes `m` as `(m + m^T) / 2`.
    pub fn from_matrix(m: DMatrix<f64>) -> Self {
        assert!(m.is_square() && m.nrows() >= 1, "SymMat needs a square matrix");
        let t = m.transpose();
        let mut m = (m + t) * 0.5;
        force_symmetric(&mut m);
        Self { m }
    }

    /// Accepts `m` if it is symmetric within `tol` (max-abs), copying the
    /// upper triangle into the lower one.
    pub fn try_from_matrix(mut m: DMatrix<f64>, tol: f64) -> Result<Self> {
        if !m.is_square() || m.nrows() == 0 {
            return Err(Error::InvalidShape(format!(
                "expected a non-empty square matrix, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let n = m.nrows();
        for j in 0..n {
            for i in 0..j {
                if (m[(i, j)] - m[(j, i)]).abs() > tol {
                    return Err(Error::InvalidShape(format!(
                        "matrix is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        force_symmetric(&mut m);
        Ok(Self { m })
    }

    /// `v v^T`.
    pub fn outer(v: &DVector<f64>) -> Self {
        Self::from_matrix(v * v.transpose())
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.m[(i, j)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.m[(i, j)] = v;
        self.m[(j, i)] = v;
    }

    /// Adds `v` to `(i, j)` and, off the diagonal, to `(j, i)`.
    #[inline]
    pub fn add_sym(&mut self, i: usize, j: usize, v: f64) {
        self.m[(i, j)] += v;
        if i != j {
            self.m[(j, i)] += v;
        }
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.m
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self { m: &self.m * a }
    }

    pub fn trace(&self) -> f64 {
        self.m.trace()
    }

    /// `trace(self * other)` without forming the product.
    pub fn trace_product(&self, other: &SymMat) -> f64 {
        self.m.dot(&other.m)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.m.norm()
    }

    pub fn quad_form(&self, x: &DVector<f64>) -> f64 {
        x.dot(&(&self.m * x))
    }

    /// Principal submatrix on `idx` (in the given order).
    pub fn submatrix(&self, idx: &[usize]) -> SymMat {
        let k = idx.len();
        let mut out = DMatrix::zeros(k, k);
        for (a, &i) in idx.iter().enumerate() {
            for (b, &j) in idx.iter().enumerate() {
                out[(a, b)] = self.m[(i, j)];
            }
        }
        Self { m: out }
    }

    pub fn is_all_finite(&self) -> bool {
        self.m.iter().all(|v| v.is_finite())
    }
}

impl std::ops::Add for &SymMat {
    type Output = SymMat;
    fn add(self, rhs: &SymMat) -> SymMat {
        SymMat {
            m: &self.m + &rhs.m,
        }
    }
}

impl std::ops::Sub for &SymMat {
    type Output = SymMat;
    fn sub(self, rhs: &SymMat) -> SymMat {
        SymMat {
            m: &self.m - &rhs.m,
        }
    }
}

fn force_symmetric(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in 0..j {
            m[(j, i)] = m[(i, j)];
        }
    }
}

// Row-major nested arrays on the wire.
impl Serialize for SymMat {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = (0..self.dim())
            .map(|i| (0..self.dim()).map(|j| self.m[(i, j)]).collect())
            .collect();
        rows.serialize(s)
    }
}

impl<'de> Deserialize<'de> for SymMat {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        let n = rows.len();
        if n == 0 || rows.iter().any(|r| r.len() != n) {
            return Err(serde::de::Error::custom("SymMat rows must form a square matrix"));
        }
        let m = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
        SymMat::try_from_matrix(m, 1e-9).map_err(serde::de::Error::custom)
    }
}

/// Half-vectorized symmetric matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct VecSym {
    dim: usize,
    values: DVector<f64>,
}

impl VecSym {
    pub fn new(values: DVector<f64>) -> Result<Self> {
        let dim = side_from_vech_len(values.len())?;
        Ok(Self { dim, values })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            values: DVector::zeros(vech_len(dim)),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn into_values(self) -> DVector<f64> {
        self.values
    }

    pub fn dot(&self, other: &VecSym) -> f64 {
        self.values.dot(&other.values)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

impl TryFrom<Vec<f64>> for VecSym {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(DVector::from_vec(v))
    }
}

impl From<VecSym> for Vec<f64> {
    fn from(v: VecSym) -> Self {
        v.values.as_slice().to_vec()
    }
}

/// Half-vectorization with `sqrt(2)` scaling of off-diagonal entries.
pub fn vech(s: &SymMat) -> VecSym {
    let n = s.dim();
    let mut v = DVector::zeros(vech_len(n));
    vech_into(s.as_matrix(), v.as_mut_slice());
    VecSym { dim: n, values: v }
}

/// Writes `vech(m)` into `out`; `m` is read from its upper triangle.
pub fn vech_into(m: &DMatrix<f64>, out: &mut [f64]) {
    let n = m.nrows();
    debug_assert_eq!(out.len(), vech_len(n));
    let mut k = 0;
    for j in 0..n {
        for i in 0..=j {
            out[k] = if i == j { m[(i, j)] } else { SQRT_2 * m[(i, j)] };
            k += 1;
        }
    }
}

/// Inverse of [`vech`].
pub fn mat(v: &VecSym) -> SymMat {
    SymMat {
        m: mat_from_slice(v.values.as_slice(), v.dim),
    }
}

/// Rebuilds the dense symmetric matrix of side `n` from a `vech` slice.
pub fn mat_from_slice(v: &[f64], n: usize) -> DMatrix<f64> {
    debug_assert_eq!(v.len(), vech_len(n));
    let mut m = DMatrix::zeros(n, n);
    let mut k = 0;
    for j in 0..n {
        for i in 0..=j {
            let val = if i == j { v[k] } else { v[k] / SQRT_2 };
            m[(i, j)] = val;
            m[(j, i)] = val;
            k += 1;
        }
    }
    m
}

/// Checked variant of [`mat`] for raw slices of unknown side length.
pub fn mat_checked(v: &[f64]) -> Result<SymMat> {
    let n = side_from_vech_len(v.len())?;
    Ok(SymMat {
        m: mat_from_slice(v, n),
    })
}

/// Eigenvalues sorted descending together with matching orthonormal
/// eigenvectors (as columns).
pub fn eig_desc(s: &SymMat) -> (DVector<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(s.m.clone());
    let n = s.dim();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals = DVector::from_iterator(n, order.iter().map(|&k| eig.eigenvalues[k]));
    let mut vecs = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vecs.set_column(dst, &eig.eigenvectors.column(src));
    }
    (vals, vecs)
}

pub fn min_eig(s: &SymMat) -> f64 {
    SymmetricEigen::new(s.m.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

pub fn max_eig(s: &SymMat) -> f64 {
    SymmetricEigen::new(s.m.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
}
