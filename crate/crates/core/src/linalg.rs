//! Tolerance-aware dense linear algebra shared by every other module.
//!
//! Rank, null space and row space all go through one SVD so that the
//! three answers agree with each other for a given [`Tolerance`].

use alloc::format;
use alloc::vec::Vec;
use core::cmp::Ordering;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen, LU, SVD};

use crate::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Numerical policy for rank decisions, PSD tests and solver accuracy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerance {
    /// Singular values at or below `rel_rank_tol · σ_max` count as zero.
    pub rel_rank_tol: f64,
    /// `λ_min ≥ −psd_tol · ‖A‖` is accepted as PSD.
    pub psd_tol: f64,
    /// Target accuracy for iterative solves.
    pub solve_tol: f64,
}

impl Default for Tolerance {
    /// Rank cut at `1e-9` relative: matrices such as `Φ` are assembled from
    /// differences of inverses and carry round-off far above `ε·max(m, n)`.
    fn default() -> Self {
        Self { rel_rank_tol: 1e-9, psd_tol: 1e-10, solve_tol: 1e-8 }
    }
}

impl Tolerance {
    pub fn new(rel_rank_tol: f64, psd_tol: f64, solve_tol: f64) -> Result<Self> {
        let t = Self { rel_rank_tol, psd_tol, solve_tol };
        t.validate()?;
        Ok(t)
    }

    /// The textbook numerical-rank convention `ε · max(m, n)`.
    pub fn machine(nrows: usize, ncols: usize) -> Self {
        let n = nrows.max(ncols).max(1) as f64;
        Self { rel_rank_tol: f64::EPSILON * n, ..Self::default() }
    }

    pub fn with_rank_tol(mut self, rel_rank_tol: f64) -> Self {
        self.rel_rank_tol = rel_rank_tol;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |x: f64| x.is_finite() && x > 0.0;
        if !ok(self.rel_rank_tol) || self.rel_rank_tol >= 1.0 || !ok(self.psd_tol) || !ok(self.solve_tol) {
            return Err(Error::InvalidInput(format!("bad tolerance {self:?}")));
        }
        Ok(())
    }
}

/// Columns are unit-norm and mutually orthogonal.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthonormalBasis {
    vectors: Mat,
}

impl OrthonormalBasis {
    const ORTHO_TOL: f64 = 1e-12;

    /// Checks orthonormality to 1e-12.
    pub fn new(vectors: Mat) -> Result<Self> {
        check_finite(&vectors, "basis")?;
        let gram = vectors.transpose() * &vectors;
        let k = gram.nrows();
        let dev = (gram - Mat::identity(k, k)).amax();
        if dev > Self::ORTHO_TOL {
            return Err(Error::InvalidInput(format!("basis is not orthonormal (deviation {dev:e})")));
        }
        Ok(Self { vectors })
    }

    pub fn empty(ambient_dim: usize) -> Self {
        Self { vectors: Mat::zeros(ambient_dim, 0) }
    }

    fn from_trusted(vectors: Mat) -> Self {
        Self { vectors }
    }

    pub fn vectors(&self) -> &Mat {
        &self.vectors
    }

    pub fn into_matrix(self) -> Mat {
        self.vectors
    }

    pub fn ambient_dim(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.dim() == 0
    }

    /// Orthogonal projector `V Vᵀ` onto the span.
    pub fn projector(&self) -> Mat {
        &self.vectors * self.vectors.transpose()
    }
}

pub fn check_finite(a: &Mat, what: &str) -> Result<()> {
    if a.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{what} has non-finite entries")))
    }
}

/// Singular values in descending order together with a full set of right
/// singular vectors (columns of `V`, `ncols × ncols`), in matching order.
fn svd_full_v(a: &Mat) -> (Vec<f64>, Mat) {
    let (m, n) = a.shape();
    // Zero-pad wide matrices so the thin SVD still returns all of V.
    let padded;
    let a = if m < n {
        padded = {
            let mut p = Mat::zeros(n, n);
            p.view_mut((0, 0), (m, n)).copy_from(a);
            p
        };
        &padded
    } else {
        a
    };
    let svd = SVD::new(a.clone(), false, true);
    let vt = svd.v_t.expect("V requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| {
        svd.singular_values[j].partial_cmp(&svd.singular_values[i]).unwrap_or(Ordering::Equal).then(i.cmp(&j))
    });
    let sigma = order.iter().map(|&i| svd.singular_values[i]).collect();
    let mut v = Mat::zeros(n, order.len());
    for (c, &i) in order.iter().enumerate() {
        let mut col = vt.row(i).transpose();
        normalize_sign(&mut col);
        v.set_column(c, &col);
    }
    (sigma, v)
}

/// Flips `v` so that its largest-magnitude entry is positive.
pub fn normalize_sign(v: &mut Vector) {
    let mut best = 0usize;
    for i in 0..v.len() {
        if v[i].abs() > v[best].abs() + 1e-14 {
            best = i;
        }
    }
    if !v.is_empty() && v[best] < 0.0 {
        v.neg_mut();
    }
}

fn singular_values_desc(a: &Mat) -> Vec<f64> {
    if a.is_empty() {
        return Vec::new();
    }
    let mut s: Vec<f64> = a.clone().singular_values().iter().copied().collect();
    s.sort_by(|x, y| y.partial_cmp(x).unwrap_or(Ordering::Equal));
    s
}

fn count_above(sigma: &[f64], tol: &Tolerance, reference: f64) -> usize {
    let smax = sigma.first().copied().unwrap_or(0.0).max(reference);
    if smax <= 0.0 {
        return 0;
    }
    sigma.iter().filter(|&&s| s > tol.rel_rank_tol * smax).count()
}

/// Number of singular values above `rel_rank_tol · σ_max`.
pub fn rank_tol(a: &Mat, tol: &Tolerance) -> Result<usize> {
    check_finite(a, "matrix")?;
    Ok(count_above(&singular_values_desc(a), tol, 0.0))
}

/// Orthonormal basis of the numerical null space of `a`.
pub fn null_basis(a: &Mat, tol: &Tolerance) -> Result<OrthonormalBasis> {
    check_finite(a, "matrix")?;
    let n = a.ncols();
    if a.nrows() == 0 || n == 0 {
        return Ok(OrthonormalBasis::from_trusted(Mat::identity(n, n)));
    }
    let (sigma, v) = svd_full_v(a);
    let r = count_above(&sigma, tol, 0.0);
    Ok(OrthonormalBasis::from_trusted(v.columns(r, n - r).into_owned()))
}

/// Rank and null basis of `a` with singular values cut at
/// `rel_rank_tol · max(σ_max, reference)`, for matrices already normalized
/// so that `reference` is their natural scale: an all-round-off matrix then
/// has full null space.
pub fn null_basis_scaled(a: &Mat, tol: &Tolerance, reference: f64) -> Result<(usize, OrthonormalBasis)> {
    check_finite(a, "matrix")?;
    let n = a.ncols();
    if a.nrows() == 0 || n == 0 {
        return Ok((0, OrthonormalBasis::from_trusted(Mat::identity(n, n))));
    }
    let (sigma, v) = svd_full_v(a);
    let r = count_above(&sigma, tol, reference);
    Ok((r, OrthonormalBasis::from_trusted(v.columns(r, n - r).into_owned())))
}

/// Orthonormal basis of the row space of `a` (as column vectors).
pub fn row_basis(a: &Mat, tol: &Tolerance) -> Result<OrthonormalBasis> {
    check_finite(a, "matrix")?;
    let n = a.ncols();
    if a.nrows() == 0 || n == 0 {
        return Ok(OrthonormalBasis::empty(n));
    }
    let (sigma, v) = svd_full_v(a);
    let r = count_above(&sigma, tol, 0.0);
    Ok(OrthonormalBasis::from_trusted(v.columns(0, r).into_owned()))
}

/// Extends `partial` to a square orthogonal matrix whose first columns are
/// exactly the given ones.
pub fn complete_unitary(partial: &OrthonormalBasis) -> Result<Mat> {
    let v = partial.vectors();
    let (n, k) = v.shape();
    let gram_dev = (v.transpose() * v - Mat::identity(k, k)).amax();
    if gram_dev > 1e-10 {
        return Err(Error::InvalidInput(format!("partial basis is not orthonormal ({gram_dev:e})")));
    }
    let complement = null_basis(&v.transpose(), &Tolerance::default())?;
    let mut q = Mat::zeros(n, n);
    q.columns_mut(0, k).copy_from(v);
    q.columns_mut(k, n - k).copy_from(complement.vectors());
    Ok(q)
}

/// `(A + Aᵀ)/2`.
pub fn symmetrize(a: &Mat) -> Mat {
    (a + a.transpose()) * 0.5
}

pub fn check_symmetric(a: &Mat, what: &str) -> Result<()> {
    if !a.is_square() {
        return Err(Error::DimensionMismatch { field: what.into(), detail: format!("{}×{} is not square", a.nrows(), a.ncols()) });
    }
    check_finite(a, what)?;
    let scale = a.amax().max(1.0);
    let asym = (a - a.transpose()).amax();
    if asym > 1e-10 * scale {
        return Err(Error::InvalidInput(format!("{what} is not symmetric (deviation {asym:e})")));
    }
    Ok(())
}

/// Eigen-decomposition of the symmetrized input with eigenvalues ascending
/// and sign-normalized eigenvectors.
pub fn sym_eigen(a: &Mat) -> (Vector, Mat) {
    let n = a.nrows();
    if n == 0 {
        return (Vector::zeros(0), Mat::zeros(0, 0));
    }
    let eig = SymmetricEigen::new(symmetrize(a));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].partial_cmp(&eig.eigenvalues[j]).unwrap_or(Ordering::Equal).then(i.cmp(&j)));
    let values = Vector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = Mat::zeros(n, n);
    for (c, &i) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(i).into_owned();
        normalize_sign(&mut col);
        vectors.set_column(c, &col);
    }
    (values, vectors)
}

pub fn lambda_min(a: &Mat) -> f64 {
    sym_eigen(a).0.iter().copied().fold(f64::INFINITY, f64::min)
}

/// `λ_min(A) ≥ −psd_tol·‖A‖₂`.
pub fn is_psd(a: &Mat, tol: &Tolerance) -> Result<bool> {
    check_symmetric(a, "matrix")?;
    let (vals, _) = sym_eigen(a);
    let norm = vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(vals.iter().all(|&l| l >= -tol.psd_tol * norm))
}

/// Strict version of [`is_psd`]: `λ_min(A) > psd_tol·‖A‖₂`.
pub fn is_pd(a: &Mat, tol: &Tolerance) -> Result<bool> {
    check_symmetric(a, "matrix")?;
    let (vals, _) = sym_eigen(a);
    let norm = vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(norm > 0.0 && vals.iter().all(|&l| l > tol.psd_tol * norm))
}

/// Maps the eigenvalues of a symmetric matrix through `f`.
pub fn sym_map(a: &Mat, f: impl Fn(f64) -> f64) -> Mat {
    let (vals, vecs) = sym_eigen(a);
    sym_map_with(&vals, &vecs, f)
}

/// `V f(Λ) Vᵀ` from an existing eigendecomposition.
pub fn sym_map_with(vals: &Vector, vecs: &Mat, f: impl Fn(f64) -> f64) -> Mat {
    let d = Vector::from_iterator(vals.len(), vals.iter().map(|&l| f(l)));
    let scaled = vecs * Mat::from_diagonal(&d);
    symmetrize(&(scaled * vecs.transpose()))
}

/// Square root of a PSD matrix, negative eigenvalues clamped to zero.
pub fn psd_sqrt(a: &Mat) -> Mat {
    sym_map(a, |l| libm::sqrt(l.max(0.0)))
}

/// Projection onto the PSD cone.
pub fn psd_project(a: &Mat) -> Mat {
    sym_map(a, |l| l.max(0.0))
}

/// Inverse of a symmetric positive-definite matrix via Cholesky, with one
/// step of iterative refinement.
pub fn spd_inverse(a: &Mat, what: &str) -> Result<Mat> {
    let a = symmetrize(a);
    let c = Cholesky::new(a.clone()).ok_or_else(|| Error::SingularModel(format!("{what} is not positive definite")))?;
    let x = c.inverse();
    let residual = Mat::identity(a.nrows(), a.ncols()) - &a * &x;
    Ok(symmetrize(&(&x + &x * residual)))
}

/// Solves `A X = B` for symmetric positive-definite `A`.
pub fn spd_solve(a: &Mat, b: &Mat, what: &str) -> Result<Mat> {
    let c = Cholesky::new(symmetrize(a)).ok_or_else(|| Error::SingularModel(format!("{what} is not positive definite")))?;
    Ok(c.solve(b))
}

/// Solves `A X = B` for a general square `A` via partial-pivot LU.
pub fn lu_solve(a: &Mat, b: &Mat, what: &str) -> Result<Mat> {
    LU::new(a.clone()).solve(b).ok_or_else(|| Error::SingularModel(format!("{what} is singular")))
}

/// Pseudo-inverse of a symmetric PSD matrix; eigenvalues below
/// `rel · λ_max` are treated as zero.
pub fn psd_pinv(a: &Mat, rel: f64) -> Mat {
    let (vals, _) = sym_eigen(a);
    let lmax = vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    sym_map(a, |l| if l > rel * lmax && l > 0.0 { 1.0 / l } else { 0.0 })
}

pub fn block_diag(blocks: &[Mat]) -> Mat {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Mat::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), b.shape()).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// `‖A − B‖_F / max(‖B‖_F, tiny)`.
pub fn rel_frob_diff(a: &Mat, b: &Mat) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

pub fn spectral_norm(a: &Mat) -> f64 {
    singular_values_desc(a).first().copied().unwrap_or(0.0)
}

/// `tr(A B Aᵀ)` without forming the product's off-diagonal.
pub fn weighted_trace(a: &Mat, b: &Mat) -> f64 {
    let ab = a * b;
    ab.component_mul(a).sum()
}
