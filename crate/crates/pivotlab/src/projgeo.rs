//! Scale-safe linear algebra on small dense matrices.
//!
//! A [`Matrix`] stores normalized entries together with a natural-log scale
//! factor, so products of thousands of factors never overflow. Every quantity
//! computed here (singular gaps, eigenvalue gaps, projective distances, cone
//! membership) is either scale invariant or log-additive.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Singular values (and eigenvalue moduli) more than this many nats below the
/// top one are treated as exact zeros.
pub const LOG_CLIFF: f64 = 36.0;

/// Relative gap below which the two top eigenvalue moduli count as tied.
pub const PROX_TIE: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("eigenvalue solver did not converge")]
    EigenFailure,
    #[error("matrix is not proximal (prox = {0})")]
    NotProximal(f64),
    #[error("the zero vector has no projective class")]
    ZeroVector,
    #[error("eigenvector residual {0:e} exceeds tolerance")]
    Residual(f64),
}

/// A square real matrix `exp(log_scale) * entries`.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    entries: DMatrix<f64>,
    log_scale: f64,
    zero: bool,
}

impl Matrix {
    /// Wraps a dense square matrix, normalizing its entries.
    pub fn new(entries: DMatrix<f64>) -> Self {
        Self::scaled(entries, 0.0)
    }

    /// Represents `exp(log_scale) * entries`, normalizing the entries.
    pub fn scaled(mut entries: DMatrix<f64>, mut log_scale: f64) -> Self {
        assert!(entries.is_square(), "matrix must be square");
        assert!(entries.nrows() >= 1, "dimension must be at least 1");
        assert!(
            entries.iter().all(|x| x.is_finite()) && log_scale.is_finite(),
            "matrix entries and scale must be finite"
        );
        let frob = entries.norm();
        if frob == 0.0 {
            return Self::zero(entries.nrows());
        }
        // frob * d^(-1/4) puts the operator norm in [d^(-1/4), d^(1/4)],
        // which is inside [1/2, 2] for every d <= 16.
        let d = entries.nrows() as f64;
        let c = frob * d.powf(-0.25);
        entries /= c;
        log_scale += c.ln();
        Matrix { entries, log_scale, zero: false }
    }

    /// Rebuilds a matrix from stored parts without renormalizing, so that a
    /// serialized matrix reads back bit-identically. Falls back to
    /// normalization if the stored entries violate the norm invariant.
    pub fn from_parts(entries: DMatrix<f64>, log_scale: f64) -> Self {
        assert!(entries.is_square() && entries.nrows() >= 1);
        assert!(entries.iter().all(|x| x.is_finite()) && log_scale.is_finite());
        if entries.iter().all(|&x| x == 0.0) {
            return Self::zero(entries.nrows());
        }
        let n = spectral_norm(&entries);
        if (0.5..=2.0).contains(&n) {
            Matrix { entries, log_scale, zero: false }
        } else {
            Self::scaled(entries, log_scale)
        }
    }

    /// Row-major constructor.
    pub fn from_rows(d: usize, rows: &[f64]) -> Self {
        assert_eq!(rows.len(), d * d, "expected {} entries", d * d);
        Self::new(DMatrix::from_row_slice(d, d, rows))
    }

    pub fn identity(d: usize) -> Self {
        Self::new(DMatrix::identity(d, d))
    }

    pub fn zero(d: usize) -> Self {
        Matrix { entries: DMatrix::zeros(d, d), log_scale: 0.0, zero: true }
    }

    pub fn diag(values: &[f64]) -> Self {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(values)))
    }

    /// Rotation of the plane by `theta`.
    pub fn rotation(theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Self::from_rows(2, &[c, -s, s, c])
    }

    /// Rank-one matrix `x yᵀ`.
    pub fn outer(x: &DVector<f64>, y: &DVector<f64>) -> Self {
        Self::new(x * y.transpose())
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    /// Normalized entries (operator norm in [1/2, 2] unless zero).
    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn log_scale(&self) -> f64 {
        self.log_scale
    }

    pub fn is_zero(&self) -> bool {
        self.zero
    }

    /// The represented matrix as plain doubles (may overflow for huge scales).
    pub fn to_dense(&self) -> DMatrix<f64> {
        &self.entries * self.log_scale.exp()
    }

    /// Same matrix multiplied by `exp(delta)`.
    pub fn shift_scale(&self, delta: f64) -> Self {
        if self.zero {
            return self.clone();
        }
        Matrix { entries: self.entries.clone(), log_scale: self.log_scale + delta, zero: false }
    }

    pub fn mul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.dim(), other.dim(), "dimension mismatch");
        if self.zero || other.zero {
            return Self::zero(self.dim());
        }
        Self::scaled(&self.entries * &other.entries, self.log_scale + other.log_scale)
    }

    pub fn transpose(&self) -> Matrix {
        Matrix { entries: self.entries.transpose(), log_scale: self.log_scale, zero: self.zero }
    }

    pub fn pow(&self, n: u32) -> Matrix {
        let mut acc = Self::identity(self.dim());
        for _ in 0..n {
            acc = acc.mul(self);
        }
        acc
    }

    /// Left-to-right product of `factors`; the identity for an empty list.
    pub fn product<'a, I: IntoIterator<Item = &'a Matrix>>(d: usize, factors: I) -> Matrix {
        factors.into_iter().fold(Self::identity(d), |acc, g| acc.mul(g))
    }

    /// Direction of `g v` as an unscaled vector (`entries · v`).
    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.entries * v
    }

    /// `log ‖g v‖` for a plain vector `v`.
    pub fn log_norm_apply(&self, v: &DVector<f64>) -> f64 {
        if self.zero {
            return f64::NEG_INFINITY;
        }
        self.log_scale + (&self.entries * v).norm().ln()
    }
}

impl std::ops::Mul for &Matrix {
    type Output = Matrix;
    fn mul(self, rhs: &Matrix) -> Matrix {
        Matrix::mul(self, rhs)
    }
}

/// Largest singular value of a plain dense matrix.
pub(crate) fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    match a.nrows() {
        1 => a[(0, 0)].abs(),
        2 => two_by_two_singular_values(a).0,
        _ => jacobi_svd(a).values[0],
    }
}

/// Thin singular value decomposition `a = U diag(values) Vᵀ` of an `m × n`
/// matrix, `m ≥ n`, with values in descending order.
#[derive(Clone, Debug)]
pub struct Svd {
    pub values: Vec<f64>,
    /// `m × n`, orthonormal columns.
    pub u: DMatrix<f64>,
    /// `n × n` orthogonal.
    pub v: DMatrix<f64>,
}

/// One-sided (Hestenes) Jacobi SVD.
///
/// Used instead of nalgebra's bidiagonal SVD, which returns wrong singular
/// vectors (and values) on nearly rank-deficient input — exactly the
/// strongly squeezing products this crate lives on. Columns of `U` for
/// vanishing singular values are completed to an orthonormal family.
pub fn jacobi_svd(a: &DMatrix<f64>) -> Svd {
    let (m, n) = a.shape();
    assert!(m >= n, "jacobi_svd expects at least as many rows as columns");
    let mut w = a.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    for _ in 0..80 {
        let mut rotated = false;
        for i in 0..n {
            for j in i + 1..n {
                let alpha = w.column(i).norm_squared();
                let beta = w.column(j).norm_squared();
                let gamma = w.column(i).dot(&w.column(j));
                if gamma.abs() <= f64::EPSILON * alpha.sqrt() * beta.sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + zeta.hypot(1.0));
                let c = 1.0 / t.hypot(1.0);
                let s = c * t;
                for mat in [&mut w, &mut v] {
                    for k in 0..mat.nrows() {
                        let (x, y) = (mat[(k, i)], mat[(k, j)]);
                        mat[(k, i)] = c * x - s * y;
                        mat[(k, j)] = s * x + c * y;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: Vec<f64> = (0..n).map(|k| w.column(k).norm()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]));
    let values: Vec<f64> = order.iter().map(|&k| norms[k]).collect();
    let mut u = DMatrix::zeros(m, n);
    let mut vs = DMatrix::zeros(n, n);
    for (col, &k) in order.iter().enumerate() {
        vs.set_column(col, &v.column(k));
        if norms[k] > 0.0 {
            u.set_column(col, &(w.column(k) / norms[k]));
        }
    }
    // Re-orthonormalize in order of decreasing value; collapsed columns are
    // replaced by the first coordinate axis that survives the projection.
    for col in 0..n {
        let mut x: DVector<f64> = u.column(col).into_owned();
        let mut axis = 0;
        loop {
            for _ in 0..2 {
                for prev in 0..col {
                    let p = u.column(prev).dot(&x);
                    x -= u.column(prev) * p;
                }
            }
            let nx = x.norm();
            if nx > 0.5 || (nx > 0.0 && values[col] > 0.0 && axis == 0) {
                u.set_column(col, &(x / nx));
                break;
            }
            x = DVector::zeros(m);
            x[axis % m] = 1.0;
            axis += 1;
        }
    }
    Svd { values, u, v: vs }
}

fn two_by_two_singular_values(a: &DMatrix<f64>) -> (f64, f64) {
    let (p, q, r, s) = (a[(0, 0)], a[(0, 1)], a[(1, 0)], a[(1, 1)]);
    let x = (p + s).hypot(q - r);
    let y = (p - s).hypot(q + r);
    ((x + y) / 2.0, (x - y).abs() / 2.0)
}

/// Sorted singular values of the normalized entries, with the cliff applied.
fn entry_singular_values(a: &DMatrix<f64>) -> Vec<f64> {
    let mut s: Vec<f64> = match a.nrows() {
        1 => vec![a[(0, 0)].abs()],
        2 => {
            let (s1, s2) = two_by_two_singular_values(a);
            vec![s1, s2]
        }
        _ => jacobi_svd(a).values,
    };
    s.sort_by(|x, y| y.total_cmp(x));
    let floor = s[0] * (-LOG_CLIFF).exp();
    for x in s.iter_mut().skip(1) {
        if *x < floor {
            *x = 0.0;
        }
    }
    s
}

/// Log singular values (descending) with left and right singular vectors.
#[derive(Clone, Debug)]
pub struct SingularData {
    /// `log s_1 ≥ … ≥ log s_d`; values below the cliff are `-inf`.
    pub log_s: Vec<f64>,
    /// Columns are left singular vectors `u_i`.
    pub left: DMatrix<f64>,
    /// Columns are right singular vectors `v_i`, so `g = Σ s_i u_i v_iᵀ`.
    pub right: DMatrix<f64>,
}

pub fn singular_data(g: &Matrix) -> SingularData {
    let d = g.dim();
    if g.zero {
        return SingularData {
            log_s: vec![f64::NEG_INFINITY; d],
            left: DMatrix::identity(d, d),
            right: DMatrix::identity(d, d),
        };
    }
    let svd = jacobi_svd(&g.entries);
    let floor = svd.values[0] * (-LOG_CLIFF).exp();
    let log_s = svd
        .values
        .iter()
        .enumerate()
        .map(|(k, &s)| if k > 0 && s < floor { f64::NEG_INFINITY } else { g.log_scale + s.ln() })
        .collect();
    SingularData { log_s, left: svd.u, right: svd.v }
}

/// Log singular values only (cheaper than [`singular_data`]).
pub fn log_singular_values(g: &Matrix) -> Vec<f64> {
    if g.zero {
        return vec![f64::NEG_INFINITY; g.dim()];
    }
    entry_singular_values(&g.entries)
        .into_iter()
        .map(|s| if s == 0.0 { f64::NEG_INFINITY } else { g.log_scale + s.ln() })
        .collect()
}

/// `log ‖g‖`; `-inf` for the zero matrix.
pub fn op_norm(g: &Matrix) -> f64 {
    if g.zero {
        return f64::NEG_INFINITY;
    }
    g.log_scale + spectral_norm(&g.entries).ln()
}

/// Singular gap `log(s_j / s_{j+1})` for `1 ≤ j < d`.
///
/// Returns `+inf` when `s_{j+1}` is below the cliff and `0` for the zero matrix.
pub fn sqz(g: &Matrix, j: usize) -> f64 {
    let d = g.dim();
    assert!(j >= 1 && j < d, "sqz index must satisfy 1 <= j < d");
    if g.zero {
        return 0.0;
    }
    let ls = log_singular_values(g);
    gap(ls[j - 1], ls[j])
}

fn gap(a: f64, b: f64) -> f64 {
    if b == f64::NEG_INFINITY {
        f64::INFINITY
    } else {
        a - b
    }
}

/// All `k`-subsets of `0..d` in lexicographic order.
pub fn subsets(d: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, d: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..d {
            if d - i < k - cur.len() {
                break;
            }
            cur.push(i);
            rec(i + 1, d, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, d, k, &mut Vec::with_capacity(k), &mut out);
    out
}

/// The `k`-th compound matrix on the basis `e_I = e_{i1}∧…∧e_{ik}`.
pub fn exterior_power(g: &Matrix, k: usize) -> Matrix {
    let d = g.dim();
    assert!(k >= 1 && k <= d);
    if k == 1 {
        return g.clone();
    }
    let idx = subsets(d, k);
    let n = idx.len();
    if g.zero {
        return Matrix::zero(n);
    }
    let a = &g.entries;
    let mut out = DMatrix::zeros(n, n);
    for (r, rows) in idx.iter().enumerate() {
        for (c, cols) in idx.iter().enumerate() {
            out[(r, c)] = if k == 2 {
                a[(rows[0], cols[0])] * a[(rows[1], cols[1])]
                    - a[(rows[0], cols[1])] * a[(rows[1], cols[0])]
            } else {
                DMatrix::from_fn(k, k, |i, j| a[(rows[i], cols[j])]).determinant()
            };
        }
    }
    Matrix::scaled(out, k as f64 * g.log_scale)
}

/// `g ∧ g` acting on `∧²E`; its norm is `s_1 s_2`.
pub fn wedge_square(g: &Matrix) -> Matrix {
    assert!(g.dim() >= 2, "wedge square needs d >= 2");
    exterior_power(g, 2)
}

/// `log(‖g‖² / ‖g∧g‖)`, the singular gap computed without an SVD of `g`.
pub fn sqz_wedge(g: &Matrix) -> f64 {
    if g.zero {
        return 0.0;
    }
    gap(2.0 * op_norm(g), op_norm(&wedge_square(g)))
}

/// Eigenvalue moduli of the normalized entries, descending.
fn eigen_moduli(a: &DMatrix<f64>) -> Result<Vec<f64>, GeoError> {
    if a.nrows() == 1 {
        return Ok(vec![a[(0, 0)].abs()]);
    }
    let schur = nalgebra::linalg::Schur::try_new(a.clone(), f64::EPSILON, 10_000)
        .ok_or(GeoError::EigenFailure)?;
    let mut m: Vec<f64> = schur.complex_eigenvalues().iter().map(|z| z.norm()).collect();
    if m.iter().any(|x| !x.is_finite()) {
        return Err(GeoError::EigenFailure);
    }
    m.sort_by(|x, y| y.total_cmp(x));
    Ok(m)
}

/// `log ρ_1(g)`, the log spectral radius; `-inf` if nilpotent within tolerance.
pub fn log_spectral_radius(g: &Matrix) -> Result<f64, GeoError> {
    if g.zero {
        return Ok(f64::NEG_INFINITY);
    }
    let m = eigen_moduli(&g.entries)?;
    if m[0] <= spectral_norm(&g.entries) * (-LOG_CLIFF).exp() {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(g.log_scale + m[0].ln())
}

/// Spectral gap `log(ρ_1/ρ_2)` of the eigenvalue moduli.
///
/// Nilpotent (within the cliff) input and ties `|ρ1−ρ2|/ρ1 < 1e-10` give 0;
/// `ρ_2` below the cliff gives `+inf`.
pub fn prox(g: &Matrix) -> Result<f64, GeoError> {
    if g.zero {
        return Ok(0.0);
    }
    let m = eigen_moduli(&g.entries)?;
    let r1 = m[0];
    if r1 <= spectral_norm(&g.entries) * (-LOG_CLIFF).exp() {
        return Ok(0.0);
    }
    if m.len() == 1 {
        return Ok(f64::INFINITY);
    }
    let r2 = m[1];
    if r2 <= r1 * (-LOG_CLIFF).exp() {
        return Ok(f64::INFINITY);
    }
    if (r1 - r2) / r1 < PROX_TIE {
        return Ok(0.0);
    }
    Ok((r1 / r2).ln())
}

/// A point of projective space, stored as a unit representative.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjPoint {
    v: DVector<f64>,
}

impl ProjPoint {
    pub fn new(v: DVector<f64>) -> Result<Self, GeoError> {
        let n = v.norm();
        if n == 0.0 || !n.is_finite() {
            return Err(GeoError::ZeroVector);
        }
        Ok(ProjPoint { v: v / n })
    }

    pub fn from_slice(v: &[f64]) -> Result<Self, GeoError> {
        Self::new(DVector::from_column_slice(v))
    }

    /// The basis line `[e_i]`.
    pub fn basis(d: usize, i: usize) -> Self {
        let mut v = DVector::zeros(d);
        v[i] = 1.0;
        ProjPoint { v }
    }

    pub fn vector(&self) -> &DVector<f64> {
        &self.v
    }

    pub fn dim(&self) -> usize {
        self.v.len()
    }
}

/// `‖x∧y‖/(‖x‖‖y‖)`, the sine of the angle between two lines.
pub fn proj_dist(x: &ProjPoint, y: &ProjPoint) -> f64 {
    vec_dist(&x.v, &y.v)
}

/// Projective distance between the lines spanned by two nonzero vectors.
pub fn vec_dist(x: &DVector<f64>, y: &DVector<f64>) -> f64 {
    let d = x.len();
    let mut acc = 0.0;
    for i in 0..d {
        for j in i + 1..d {
            let w = x[i] * y[j] - x[j] * y[i];
            acc += w * w;
        }
    }
    (acc.sqrt() / (x.norm() * y.norm())).min(1.0)
}

/// Membership tests for the cones `V^ε(g)`, `U^ε(g) = g V^ε(g)` and
/// `W^ε(g) = U^ε(gᵀ)`, plus the canonical top directions.
#[derive(Clone, Debug)]
pub struct Cones {
    eps: f64,
    entries: DMatrix<f64>,
    s: Vec<f64>,
    left: DMatrix<f64>,
    right: DMatrix<f64>,
}

pub fn cones(g: &Matrix, eps: f64) -> Cones {
    assert!(eps > 0.0 && eps <= 1.0, "eps must lie in (0, 1]");
    assert!(!g.zero, "cones of the zero matrix are empty");
    let sd = singular_data(g);
    let s = sd
        .log_s
        .iter()
        .map(|&l| if l == f64::NEG_INFINITY { 0.0 } else { (l - g.log_scale).exp() })
        .collect();
    Cones { eps, entries: g.entries.clone(), s, left: sd.left, right: sd.right }
}

impl Cones {
    pub fn eps(&self) -> f64 {
        self.eps
    }

    /// `‖g x‖ / (‖g‖ ‖x‖)`.
    pub fn v_ratio(&self, x: &DVector<f64>) -> f64 {
        (&self.entries * x).norm() / (self.s[0] * x.norm())
    }

    /// Best ratio `‖g x‖/(‖g‖‖x‖)` over preimages `x` of `y`; 0 outside the image.
    pub fn u_ratio(&self, y: &DVector<f64>) -> f64 {
        preimage_ratio(&self.left, &self.s, y)
    }

    /// Same as [`Cones::u_ratio`] for `gᵀ`, i.e. for functionals `f = φ g`.
    pub fn w_ratio(&self, f: &DVector<f64>) -> f64 {
        preimage_ratio(&self.right, &self.s, f)
    }

    pub fn in_v(&self, x: &DVector<f64>) -> bool {
        self.v_ratio(x) >= self.eps
    }

    pub fn in_u(&self, y: &DVector<f64>) -> bool {
        self.u_ratio(y) >= self.eps
    }

    pub fn in_w(&self, f: &DVector<f64>) -> bool {
        self.w_ratio(f) >= self.eps
    }

    /// Top left singular direction, the image of the top right singular vector.
    pub fn top_u(&self) -> ProjPoint {
        ProjPoint { v: self.left.column(0).into_owned() }
    }

    /// Top functional: `w = v_1ᵀ`, so that `g A h` is governed by `w(g)·u(h)`.
    pub fn top_w(&self) -> ProjPoint {
        ProjPoint { v: self.right.column(0).into_owned() }
    }
}

fn preimage_ratio(basis: &DMatrix<f64>, s: &[f64], y: &DVector<f64>) -> f64 {
    let ny2 = y.norm_squared();
    if ny2 == 0.0 {
        return 0.0;
    }
    let mut in_image = 0.0;
    let mut pre = 0.0;
    for (i, &si) in s.iter().enumerate() {
        if si == 0.0 {
            continue;
        }
        let c = basis.column(i).dot(y);
        in_image += c * c;
        pre += (c / si) * (c / si);
    }
    if ny2 - in_image > 1e-20 * ny2 || pre == 0.0 {
        return 0.0;
    }
    (in_image.sqrt() / (s[0] * pre.sqrt())).min(1.0)
}

/// `log s_1 − log s_d`; `+inf` for singular input.
#[allow(non_snake_case)]
pub fn N_of(g: &Matrix) -> f64 {
    if g.zero {
        return f64::INFINITY;
    }
    let ls = log_singular_values(g);
    gap(ls[0], ls[ls.len() - 1])
}

/// The top eigenline `E⁺(g)` of a proximal matrix.
pub fn top_eigenline(g: &Matrix) -> Result<ProjPoint, GeoError> {
    let p = prox(g)?;
    if !(p > 1e-9) {
        return Err(GeoError::NotProximal(p));
    }
    let d = g.dim();
    if d == 1 {
        return Ok(ProjPoint::basis(1, 0));
    }
    let a = &g.entries;
    let schur = nalgebra::linalg::Schur::try_new(a.clone(), f64::EPSILON, 10_000)
        .ok_or(GeoError::EigenFailure)?;
    let lambda = schur
        .complex_eigenvalues()
        .iter()
        .copied()
        .max_by(|x, y| x.norm().total_cmp(&y.norm()))
        .ok_or(GeoError::EigenFailure)?
        .re;
    let shifted = a - DMatrix::identity(d, d) * lambda;
    let v: DVector<f64> = jacobi_svd(&shifted).v.column(d - 1).into_owned();
    let residual = (a * &v - &v * lambda).norm();
    if residual > 1e-8 * spectral_norm(a) {
        return Err(GeoError::Residual(residual));
    }
    ProjPoint::new(v)
}

/// Running right product `g_1 ⋯ g_n` tracked on the exterior powers
/// `∧^1 … ∧^kmax`, so singular gaps of long products stay exact far beyond
/// the cliff of a single SVD.
#[derive(Clone, Debug)]
pub struct ExteriorProduct {
    powers: Vec<Matrix>,
}

impl ExteriorProduct {
    pub fn new(d: usize, kmax: usize) -> Self {
        assert!(kmax >= 1 && kmax <= d);
        let powers = (1..=kmax).map(|k| Matrix::identity(subsets(d, k).len())).collect();
        ExteriorProduct { powers }
    }

    /// Right-multiplies the product by `g`.
    pub fn push(&mut self, g: &Matrix) {
        for (k, p) in self.powers.iter_mut().enumerate() {
            let gk = exterior_power(g, k + 1);
            *p = p.mul(&gk);
        }
    }

    /// Left-multiplies the product by `g`.
    pub fn push_left(&mut self, g: &Matrix) {
        for (k, p) in self.powers.iter_mut().enumerate() {
            let gk = exterior_power(g, k + 1);
            *p = gk.mul(p);
        }
    }

    /// The product itself.
    pub fn product(&self) -> &Matrix {
        &self.powers[0]
    }

    /// `log ‖∧^k (product)‖ = log(s_1 ⋯ s_k)`; `k = 0` gives 0.
    pub fn log_norm(&self, k: usize) -> f64 {
        if k == 0 {
            0.0
        } else {
            op_norm(&self.powers[k - 1])
        }
    }

    /// `log(s_j/s_{j+1})` of the product; needs `kmax ≥ j + 1`.
    pub fn sqz(&self, j: usize) -> f64 {
        assert!(j >= 1 && j < self.powers.len(), "need kmax >= j + 1");
        let (a, b, c) = (self.log_norm(j - 1), self.log_norm(j), self.log_norm(j + 1));
        if self.powers[0].is_zero() {
            return 0.0;
        }
        if b == f64::NEG_INFINITY || c == f64::NEG_INFINITY {
            return f64::INFINITY;
        }
        2.0 * b - a - c
    }
}

/// Exact singular gap of `g_0 ⋯ g_n`, accumulated through `∧²`.
pub fn sqz_of_product(factors: &[Matrix]) -> f64 {
    assert!(!factors.is_empty());
    let d = factors[0].dim();
    assert!(d >= 2);
    let mut acc = ExteriorProduct::new(d, 2);
    for g in factors {
        acc.push(g);
    }
    acc.sqz(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian(d: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::new(DMatrix::from_fn(d, d, |_, _| rng.sample(StandardNormal)))
    }

    fn gaussian_vec(d: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
        DVector::from_fn(d, |_, _| rng.sample(StandardNormal))
    }

    #[test]
    fn norm_of_simple_matrices() {
        assert_relative_eq!(op_norm(&Matrix::identity(3)), 0.0, epsilon = 1e-14);
        assert_relative_eq!(op_norm(&Matrix::diag(&[2.0, 1.0])), 2f64.ln(), epsilon = 1e-14);
        assert_eq!(op_norm(&Matrix::zero(2)), f64::NEG_INFINITY);
    }

    #[test]
    fn norm_matches_sphere_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = gaussian(4, &mut rng);
        let mut best = f64::NEG_INFINITY;
        for _ in 0..100_000 {
            let x = gaussian_vec(4, &mut rng);
            best = best.max(g.log_norm_apply(&x) - x.norm().ln());
        }
        // Sampling only approaches the max from below; the gap shrinks quadratically.
        let exact = op_norm(&g);
        assert!(best <= exact + 1e-12);
        // Refine the best direction by power iteration to close the sampling gap.
        let a = g.entries().transpose() * g.entries();
        let mut x = gaussian_vec(4, &mut rng);
        for _ in 0..500 {
            x = &a * &x;
            x /= x.norm();
        }
        assert_relative_eq!(g.log_norm_apply(&x), exact, epsilon = 1e-6);
        assert!(exact - best < 0.05);
    }

    #[test]
    fn normalization_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for d in 1..=8 {
            let mut g = Matrix::identity(d);
            for _ in 0..50 {
                g = g.mul(&gaussian(d, &mut rng).shift_scale(3.0));
                let n = spectral_norm(g.entries());
                assert!((0.5..=2.0).contains(&n), "d={d} norm={n}");
            }
        }
    }

    #[test]
    fn sqz_examples() {
        assert_relative_eq!(sqz(&Matrix::diag(&[5.0, 2.0]), 1), (2.5f64).ln(), epsilon = 1e-14);
        assert_eq!(sqz(&Matrix::identity(3), 1), 0.0);
        assert_eq!(sqz(&Matrix::diag(&[1.0, 0.0]), 1), f64::INFINITY);
        assert_eq!(sqz(&Matrix::zero(2), 1), 0.0);
        assert_relative_eq!(sqz(&Matrix::diag(&[3.0, 2.0, 1.0]), 2), 2f64.ln(), epsilon = 1e-14);
    }

    #[test]
    fn jacobi_svd_on_nearly_rank_one_input() {
        // A product with gap ≈ 35 whose nalgebra SVD recomposes with error 0.12.
        let a = DMatrix::from_column_slice(
            2,
            2,
            &[0.15735972089112713, 0.5634245235569137, -0.27851330649106737, -0.9972134300019425],
        );
        let s = jacobi_svd(&a);
        let rec = &s.u * DMatrix::from_diagonal(&DVector::from_vec(s.values.clone())) * s.v.transpose();
        assert!((rec - &a).norm() < 1e-15);
        // both columns are multiples of the top left direction
        let col = a.column(0) / a.column(0).norm();
        assert!(1.0 - s.u.column(0).dot(&col).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = gaussian(4, &mut rng);
        let s = jacobi_svd(g.entries());
        assert!(s.values.windows(2).all(|w| w[0] >= w[1]));
        assert!((s.u.transpose() * &s.u - DMatrix::identity(4, 4)).norm() < 1e-14);
    }

    #[test]
    fn sqz_svd_matches_wedge() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = gaussian(5, &mut rng);
        assert!((sqz(&g, 1) - sqz_wedge(&g)).abs() < 1e-8);
    }

    #[test]
    fn wedge_examples() {
        let w = wedge_square(&Matrix::identity(3));
        assert_eq!(w.dim(), 3);
        assert!((w.to_dense() - DMatrix::identity(3, 3)).norm() < 1e-14);
        let w = wedge_square(&Matrix::diag(&[2.0, 3.0]));
        assert_eq!(w.dim(), 1);
        assert_relative_eq!(w.to_dense()[(0, 0)], 6.0, epsilon = 1e-12);
    }

    #[test]
    fn wedge_norm_is_product_of_top_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for d in 2..=6 {
            let g = gaussian(d, &mut rng);
            let ls = log_singular_values(&g);
            assert!((op_norm(&wedge_square(&g)) - (ls[0] + ls[1])).abs() < 1e-8);
        }
    }

    #[test]
    fn compound_is_multiplicative() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for k in 1..=3 {
            let g = gaussian(4, &mut rng);
            let h = gaussian(4, &mut rng);
            let lhs = exterior_power(&g.mul(&h), k).to_dense();
            let rhs = exterior_power(&g, k).mul(&exterior_power(&h, k)).to_dense();
            assert!((lhs - &rhs).norm() < 1e-10 * rhs.norm());
        }
    }

    #[test]
    fn prox_examples() {
        assert_relative_eq!(prox(&Matrix::diag(&[2.0, 1.0])).unwrap(), 2f64.ln(), epsilon = 1e-12);
        assert_eq!(prox(&Matrix::rotation(std::f64::consts::FRAC_PI_4)).unwrap(), 0.0);
        assert_eq!(prox(&Matrix::from_rows(2, &[0.0, 1.0, 0.0, 0.0])).unwrap(), 0.0);
        assert_eq!(prox(&Matrix::diag(&[1.0, 0.0])).unwrap(), f64::INFINITY);
    }

    #[test]
    fn prox_is_limit_of_power_gaps() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut found = 0;
        while found < 5 {
            let g = gaussian(3, &mut rng);
            let p = prox(&g).unwrap();
            if !(p > 0.3) {
                continue;
            }
            found += 1;
            let rate = |n: usize| {
                let factors = vec![g.clone(); n];
                sqz_of_product(&factors) / n as f64
            };
            let (a, b) = (rate(64), rate(128));
            assert!((a - b).abs() < 0.02 * b, "{a} vs {b}");
            assert!((b - p).abs() < 0.02 * p + 0.05, "{b} vs {p}");
        }
    }

    #[test]
    fn proj_dist_examples() {
        let e1 = ProjPoint::basis(3, 0);
        let e2 = ProjPoint::basis(3, 1);
        assert_eq!(proj_dist(&e1, &e1), 0.0);
        assert_relative_eq!(proj_dist(&e1, &e2), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn proj_dist_is_min_over_scalars() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let x = gaussian_vec(4, &mut rng);
            let y = gaussian_vec(4, &mut rng);
            // min_a ‖x − a y‖ by golden-section search on a bracket.
            let f = |a: f64| (&x - &y * a).norm() / x.norm();
            let (mut lo, mut hi) = (-10.0, 10.0);
            for _ in 0..200 {
                let m1 = lo + (hi - lo) * 0.381_966;
                let m2 = hi - (hi - lo) * 0.381_966;
                if f(m1) < f(m2) {
                    hi = m2;
                } else {
                    lo = m1;
                }
            }
            let d = vec_dist(&x, &y);
            assert!((f(0.5 * (lo + hi)) - d).abs() < 1e-7);
        }
    }

    #[test]
    fn cone_examples() {
        let c = cones(&Matrix::diag(&[2.0, 1.0]), 1.0);
        assert!(c.in_v(&DVector::from_vec(vec![1.0, 0.0])));
        assert!(!c.in_v(&DVector::from_vec(vec![0.0, 1.0])));
        let c = cones(&Matrix::diag(&[4.0, 1.0]), 0.5);
        assert!(c.in_v(&DVector::from_vec(vec![1.0, 1.0])));
        // eps small enough that eps‖g‖ ≤ s_d: every vector qualifies.
        let c = cones(&Matrix::diag(&[4.0, 1.0]), 0.25);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let x = gaussian_vec(2, &mut rng);
            assert!(c.in_v(&x) && c.in_u(&x) && c.in_w(&x));
        }
    }

    #[test]
    fn image_cone_of_singular_matrix() {
        let c = cones(&Matrix::diag(&[1.0, 0.0]), 0.5);
        assert!(c.in_u(&DVector::from_vec(vec![1.0, 0.0])));
        assert!(!c.in_u(&DVector::from_vec(vec![1.0, 1.0])));
    }

    #[test]
    fn n_of_examples() {
        assert_eq!(N_of(&Matrix::identity(2)), 0.0);
        assert_relative_eq!(N_of(&Matrix::diag(&[2.0, 0.5])), 2.0 * 2f64.ln(), epsilon = 1e-14);
        assert_eq!(N_of(&Matrix::diag(&[1.0, 0.0])), f64::INFINITY);
    }

    #[test]
    fn n_of_matches_explicit_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for d in 2..=5 {
            let g = gaussian(d, &mut rng);
            let inv = Matrix::new(g.to_dense().try_inverse().unwrap());
            assert!((N_of(&g) - (op_norm(&g) + op_norm(&inv))).abs() < 1e-7);
        }
    }

    #[test]
    fn eigenline_examples() {
        let l = top_eigenline(&Matrix::diag(&[3.0, 1.0])).unwrap();
        assert!(proj_dist(&l, &ProjPoint::basis(2, 0)) < 1e-12);
        let r = Matrix::rotation(0.7);
        let g = r.mul(&Matrix::diag(&[3.0, 1.0])).mul(&r.transpose());
        let l = top_eigenline(&g).unwrap();
        let expected = ProjPoint::new(r.apply(&DVector::from_vec(vec![1.0, 0.0]))).unwrap();
        assert!(proj_dist(&l, &expected) < 1e-10);
        assert!(top_eigenline(&Matrix::rotation(1.0)).is_err());
    }

    #[test]
    fn eigenline_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut checked = 0;
        while checked < 20 {
            let g = gaussian(4, &mut rng);
            if let Ok(l) = top_eigenline(&g) {
                let v = l.vector();
                let gv = g.apply(v);
                let lambda = gv.dot(v);
                assert!((gv - v * lambda).norm() < 1e-8 * spectral_norm(g.entries()));
                checked += 1;
            }
        }
    }

    #[test]
    fn exterior_product_tracks_gaps_past_the_cliff() {
        let h = Matrix::diag(&[5f64.exp(), (-5f64).exp()]);
        let mut acc = ExteriorProduct::new(2, 2);
        for _ in 0..40 {
            acc.push(&h);
        }
        assert_relative_eq!(acc.sqz(1), 400.0, epsilon = 1e-9);
        assert_eq!(sqz(acc.product(), 1), f64::INFINITY);
    }

    #[test]
    fn subsets_are_lexicographic() {
        assert_eq!(subsets(4, 2).len(), 6);
        assert_eq!(subsets(4, 2)[0], vec![0, 1]);
        assert_eq!(subsets(4, 2)[5], vec![2, 3]);
        assert_eq!(subsets(3, 3), vec![vec![0, 1, 2]]);
    }
}
