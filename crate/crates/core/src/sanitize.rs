//! The sanitization mechanism `𝒯_i(y_i) = C_i y_i + ξ_i`, `ξ_i ~ N(0, Θ_i)`.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::linalg::{self, check_symmetric, Mat, Tolerance, Vector};
use crate::model::SystemModel;
use crate::{Error, Result};

/// Off-block entries above this magnitude are rejected.
pub const OFF_BLOCK_TOL: f64 = 1e-12;

/// Block-diagonal compression `C` and block-diagonal PSD noise covariance `Θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sanitization {
    c: Mat,
    theta: Mat,
}

/// Rejects off-block entries above [`OFF_BLOCK_TOL`] and zeroes the rest.
fn check_block_diagonal(a: &mut Mat, agent_dims: &[usize], what: &str) -> Result<()> {
    let mut owner = Vec::with_capacity(a.nrows());
    for (i, &d) in agent_dims.iter().enumerate() {
        owner.extend(core::iter::repeat_n(i, d));
    }
    for r in 0..a.nrows() {
        for c in 0..a.ncols() {
            if owner[r] != owner[c] {
                if a[(r, c)].abs() > OFF_BLOCK_TOL {
                    return Err(Error::InvariantViolation(format!("{what} has off-block entry {:e} at ({r}, {c})", a[(r, c)])));
                }
                a[(r, c)] = 0.0;
            }
        }
    }
    Ok(())
}

impl Sanitization {
    /// Validates shape, block structure and `Θ ⪰ 0`.
    pub fn new(agent_dims: &[usize], mut c: Mat, mut theta: Mat) -> Result<Self> {
        let n: usize = agent_dims.iter().sum();
        for (m, what) in [(&mut c, "C"), (&mut theta, "Theta")] {
            if m.shape() != (n, n) {
                return Err(Error::DimensionMismatch { field: what.into(), detail: format!("expected {n}×{n}, got {}×{}", m.nrows(), m.ncols()) });
            }
            linalg::check_finite(m, what)?;
            check_block_diagonal(m, agent_dims, what)?;
        }
        check_symmetric(&theta, "Theta")?;
        let theta = linalg::symmetrize(&theta);
        if !linalg::is_psd(&theta, &Tolerance::default())? {
            return Err(Error::InvariantViolation("Theta must be positive semidefinite".into()));
        }
        Ok(Self { c, theta })
    }

    /// Pure-noise mechanism `(I, Θ)`.
    pub fn noise_only(agent_dims: &[usize], theta: Mat) -> Result<Self> {
        let n = theta.nrows();
        Self::new(agent_dims, Mat::identity(n, n), theta)
    }

    /// The identity mechanism `(I, 0)`.
    pub fn identity(n: usize) -> Self {
        Self { c: Mat::identity(n, n), theta: Mat::zeros(n, n) }
    }

    /// Builds a square mechanism from per-agent rectangular blocks
    /// (`C_i` is `m_i × N_i` with `m_i ≤ N_i`) by zero-padding rows.
    pub fn from_rectangular_blocks(c_blocks: &[Mat], theta_blocks: &[Mat]) -> Result<Self> {
        if c_blocks.len() != theta_blocks.len() {
            return Err(Error::DimensionMismatch { field: "blocks".into(), detail: "C and Theta block counts differ".into() });
        }
        let mut cs = Vec::new();
        let mut ts = Vec::new();
        let mut dims = Vec::new();
        for (c, t) in c_blocks.iter().zip(theta_blocks) {
            let (m, ni) = c.shape();
            if m > ni || t.shape() != (m, m) {
                return Err(Error::DimensionMismatch { field: "blocks".into(), detail: format!("C block {m}×{ni} with Theta {}×{}", t.nrows(), t.ncols()) });
            }
            let mut cp = Mat::zeros(ni, ni);
            cp.rows_mut(0, m).copy_from(c);
            let mut tp = Mat::zeros(ni, ni);
            tp.view_mut((0, 0), (m, m)).copy_from(t);
            cs.push(cp);
            ts.push(tp);
            dims.push(ni);
        }
        Self::new(&dims, linalg::block_diag(&cs), linalg::block_diag(&ts))
    }

    pub fn c(&self) -> &Mat {
        &self.c
    }

    pub fn theta(&self) -> &Mat {
        &self.theta
    }

    pub fn n(&self) -> usize {
        self.c.nrows()
    }

    pub fn is_noise_only(&self) -> bool {
        self.c == Mat::identity(self.n(), self.n())
    }

    /// Diagonal block `i` of `C` and `Θ`.
    pub fn block(&self, start: usize, len: usize) -> (Mat, Mat) {
        (self.c.view((start, start), (len, len)).into_owned(), self.theta.view((start, start), (len, len)).into_owned())
    }
}

fn per_block<F>(model_dims: &[usize], mut f: F) -> Result<()>
where
    F: FnMut(usize, usize) -> Result<()>,
{
    let mut start = 0;
    for &d in model_dims {
        f(start, d)?;
        start += d;
    }
    Ok(())
}

/// Noise normalization: an equivalent mechanism `(C′, Λ_b)` with `Λ_b`
/// diagonal, entries in `{0, 1}`.
///
/// Per block, `Θ_i = Q diag(Λ₊, 0) Qᵀ`; then `C′_i = diag(Λ₊^{-1/2}, I) Qᵀ C_i`
/// and `Λ_b = diag(I, 0)`.
pub fn normalize(model: &SystemModel, s: &Sanitization) -> Result<Sanitization> {
    let dims = model.agent_dims();
    let n = model.n();
    let mut c_new = Mat::zeros(n, n);
    let mut lam = Mat::zeros(n, n);
    per_block(dims, |start, d| {
        let (c, t) = s.block(start, d);
        let (vals, vecs) = linalg::sym_eigen(&t);
        let lmax = vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        // descending, so positive eigenvalues come first
        let mut order: Vec<usize> = (0..d).rev().collect();
        order.sort_by(|&a, &b| vals[b].partial_cmp(&vals[a]).unwrap_or(core::cmp::Ordering::Equal));
        let qt_c = vecs.transpose() * &c;
        for (row, &k) in order.iter().enumerate() {
            let positive = vals[k] > 1e-14 * lmax && vals[k] > 0.0;
            let scale = if positive { 1.0 / libm::sqrt(vals[k]) } else { 1.0 };
            let src = qt_c.row(k) * scale;
            c_new.view_mut((start + row, start), (1, d)).copy_from(&src);
            lam[(start + row, start + row)] = if positive { 1.0 } else { 0.0 };
        }
        Ok(())
    })?;
    Sanitization::new(dims, c_new, lam)
}

/// Draws `C y + ξ`, `ξ ~ N(0, Θ)`, with `ξ = Q diag(√λ₊) z` from the
/// eigendecomposition of `Θ` (negative eigenvalues clamped to zero).
pub fn apply<R: Rng + ?Sized>(s: &Sanitization, y: &Vector, rng: &mut R) -> Result<Vector> {
    let n = s.n();
    if y.len() != n {
        return Err(Error::DimensionMismatch { field: "y".into(), detail: format!("length {} for N = {n}", y.len()) });
    }
    let mut out = s.c() * y;
    if s.theta().iter().all(|&x| x == 0.0) {
        return Ok(out);
    }
    let (vals, vecs) = linalg::sym_eigen(s.theta());
    // Draw in coordinate order so a 1×1 Θ = [[1]] gives the first normal draw.
    let z = Vector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let scaled = Vector::from_iterator(n, (0..n).map(|k| libm::sqrt(vals[k].max(0.0)) * z[k]));
    out += vecs * scaled;
    Ok(out)
}

/// A pure-noise mechanism `(I, Θ_λ)` approaching `(C, Θ)` as `λ → 0`.
///
/// Per block, `C_i = P Σ Qᵀ` is replaced by `C_λ`, the same factorization
/// with (numerically) zero singular values set to `λ`, and `Θ` by `Θ + P_N` where `P_N` projects onto
/// `null(C R Cᵀ + Θ)` — a direction no measurement reaches, so the bound
/// is unchanged. Then `Θ_λ = C_λ⁻¹ (Θ + P_N) C_λ⁻ᵀ`, which by the
/// compression-invariance identity gives `P̃(I, Θ_λ) = P̃(C_λ, Θ + P_N)`.
pub fn boundary_approximation(model: &SystemModel, s: &Sanitization, lambda: f64) -> Result<Sanitization> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::InvalidInput(format!("lambda must be positive, got {lambda}")));
    }
    let dims = model.agent_dims();
    let n = model.n();
    let m = s.c() * model.r() * s.c().transpose() + s.theta();
    let (mvals, mvecs) = linalg::sym_eigen(&m);
    let mmax = mvals.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut pn = Mat::zeros(n, n);
    for k in 0..n {
        if mvals[k] <= 1e-12 * mmax.max(f64::MIN_POSITIVE) {
            let v = mvecs.column(k);
            pn += &v * v.transpose();
        }
    }
    // null(M) is spanned by per-block vectors, so P_N is block-diagonal up to round-off
    let theta_aug = s.theta() + zero_off_blocks(&pn, dims);
    let mut out = Mat::zeros(n, n);
    per_block(dims, |start, d| {
        let c = s.c().view((start, start), (d, d)).into_owned();
        let svd = c.svd(true, true);
        let (p, q_t) = (svd.u.expect("U"), svd.v_t.expect("V"));
        let smax = svd.singular_values.iter().fold(0.0f64, |a, &x| a.max(x));
        let sig_lam = Vector::from_iterator(d, svd.singular_values.iter().map(|&x| if x <= 1e-12 * smax { lambda } else { x }));
        // C_λ⁻¹ = Q diag(1/σ) Pᵀ
        let inv = q_t.transpose() * Mat::from_diagonal(&sig_lam.map(|x| 1.0 / x)) * p.transpose();
        let t = theta_aug.view((start, start), (d, d)).into_owned();
        let tl = linalg::symmetrize(&(&inv * t * inv.transpose()));
        out.view_mut((start, start), (d, d)).copy_from(&tl);
        Ok(())
    })?;
    Sanitization::noise_only(dims, linalg::psd_project(&out))
}

fn zero_off_blocks(a: &Mat, dims: &[usize]) -> Mat {
    let mut out = Mat::zeros(a.nrows(), a.ncols());
    let mut start = 0;
    for &d in dims {
        out.view_mut((start, start), (d, d)).copy_from(&a.view((start, start), (d, d)));
        start += d;
    }
    out
}

/// `(AC, AΘAᵀ)` for a block-diagonal invertible `A`; leaves the bound
/// unchanged.
pub fn transform(model: &SystemModel, s: &Sanitization, a: &Mat) -> Result<Sanitization> {
    Sanitization::new(model.agent_dims(), a * s.c(), linalg::symmetrize(&(a * s.theta() * a.transpose())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crlb::{self, perturbed_crlb};
    use alloc::vec;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn m1(x: f64) -> Mat {
        Mat::from_element(1, 1, x)
    }

    fn scalar_model() -> SystemModel {
        SystemModel::new(m1(1.0), m1(1.0), None, m1(1.0), vec![m1(1.0)], vec![1]).unwrap()
    }

    fn diag(v: &[f64]) -> Mat {
        Mat::from_diagonal(&Vector::from_row_slice(v))
    }

    fn eye_model(n: usize) -> SystemModel {
        SystemModel::new(Mat::identity(n, n), Mat::identity(n, n), None, Mat::identity(1, n), vec![Mat::identity(1, n)], vec![n]).unwrap()
    }

    #[test]
    fn rejects_off_block_entries() {
        let mut c = Mat::identity(2, 2);
        c[(0, 1)] = 1e-6;
        assert!(Sanitization::new(&[1, 1], c, Mat::zeros(2, 2)).is_err());
        let mut t = Mat::identity(2, 2);
        t[(0, 1)] = 1e-13;
        t[(1, 0)] = 1e-13;
        let s = Sanitization::new(&[1, 1], Mat::identity(2, 2), t).unwrap();
        assert_eq!(s.theta(), &Mat::identity(2, 2));
    }

    #[test]
    fn rejects_indefinite_theta() {
        assert!(Sanitization::noise_only(&[2], diag(&[1.0, -1.0])).is_err());
    }

    #[test]
    fn normalize_zero_noise_keeps_c_up_to_orthogonal_factor() {
        let m = eye_model(2);
        let c = Mat::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let s = Sanitization::new(&[2], c.clone(), Mat::zeros(2, 2)).unwrap();
        let out = normalize(&m, &s).unwrap();
        assert_eq!(out.theta(), &Mat::zeros(2, 2));
        let g1 = c.transpose() * &c;
        let g2 = out.c().transpose() * out.c();
        assert!((g1 - g2).amax() < 1e-12);
    }

    #[test]
    fn normalize_scalar() {
        let m = scalar_model();
        let s = Sanitization::noise_only(&[1], m1(4.0)).unwrap();
        let out = normalize(&m, &s).unwrap();
        assert!((out.c()[(0, 0)] - 0.5).abs() < 1e-15);
        assert_eq!(out.theta()[(0, 0)], 1.0);
        for s in [&s, &out] {
            let p = perturbed_crlb(&m, s).unwrap().finite().unwrap().clone();
            assert!((p[(0, 0)] - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_diagonal() {
        let m = eye_model(2);
        let s = Sanitization::noise_only(&[2], diag(&[0.0, 9.0])).unwrap();
        let out = normalize(&m, &s).unwrap();
        // the positive direction comes first after reordering
        let lam: Vec<f64> = (0..2).map(|i| out.theta()[(i, i)]).collect();
        assert_eq!(lam.iter().filter(|&&x| x == 1.0).count(), 1);
        assert_eq!(lam.iter().filter(|&&x| x == 0.0).count(), 1);
        let mut rows: Vec<(f64, f64, f64)> = (0..2).map(|i| (lam[i], out.c()[(i, 0)].abs(), out.c()[(i, 1)].abs())).collect();
        rows.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        assert_eq!(rows[0], (0.0, 1.0, 0.0));
        assert!((rows[1].2 - 1.0 / 3.0).abs() < 1e-15 && rows[1].1 == 0.0);
    }

    #[test]
    fn apply_without_noise_is_exact() {
        let s = Sanitization::new(&[2], Mat::from_row_slice(2, 2, &[2.0, 0.0, 1.0, 1.0]), Mat::zeros(2, 2)).unwrap();
        let y = Vector::from_row_slice(&[1.0, 3.0]);
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        assert_eq!(apply(&s, &y, &mut rng).unwrap(), Vector::from_row_slice(&[2.0, 4.0]));
        assert!(apply(&s, &Vector::zeros(3), &mut rng).is_err());
    }

    #[test]
    fn apply_scalar_uses_first_normal_draw() {
        let s = Sanitization::noise_only(&[1], m1(1.0)).unwrap();
        let y = Vector::from_row_slice(&[0.25]);
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let mut reference = ChaCha20Rng::seed_from_u64(7);
        let z: f64 = reference.sample(StandardNormal);
        assert_eq!(apply(&s, &y, &mut rng).unwrap()[0], 0.25 + z);
    }

    #[test]
    fn apply_empirical_covariance() {
        let theta = Mat::from_row_slice(3, 3, &[2.0, 0.5, 0.0, 0.5, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let s = Sanitization::noise_only(&[3], theta.clone()).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        let y = Vector::zeros(3);
        let mut acc = Mat::zeros(3, 3);
        let n = 100_000;
        for _ in 0..n {
            let x = apply(&s, &y, &mut rng).unwrap();
            acc += &x * x.transpose();
        }
        acc /= n as f64;
        assert!(linalg::rel_frob_diff(&acc, &theta) < 0.05);
    }

    #[test]
    fn boundary_invertible_c_is_exact() {
        let m = eye_model(2);
        let s = Sanitization::new(&[2], Mat::from_row_slice(2, 2, &[2.0, 1.0, 0.0, 1.0]), diag(&[1.0, 0.5])).unwrap();
        let target = perturbed_crlb(&m, &s).unwrap().finite().unwrap().clone();
        for lam in [1.0, 0.1, 1e-3] {
            let b = boundary_approximation(&m, &s, lam).unwrap();
            assert!(b.is_noise_only());
            let p = perturbed_crlb(&m, &b).unwrap().finite().unwrap().clone();
            assert!(linalg::rel_frob_diff(&p, &target) < 1e-10);
        }
    }

    #[test]
    fn boundary_full_suppression_grows() {
        let m = scalar_model();
        let s = Sanitization::new(&[1], m1(0.0), m1(0.0)).unwrap();
        assert!(perturbed_crlb(&m, &s).unwrap().is_unbounded());
        let mut prev = 0.0;
        for lam in [1.0, 0.1, 0.01] {
            let p = perturbed_crlb(&m, &boundary_approximation(&m, &s, lam).unwrap()).unwrap().finite().unwrap().clone();
            assert!(p[(0, 0)] > prev);
            prev = p[(0, 0)];
        }
        assert!(prev > 1e3);
    }

    #[test]
    fn boundary_partial_suppression() {
        let m = eye_model(2);
        let s = Sanitization::new(&[2], diag(&[1.0, 0.0]), Mat::zeros(2, 2)).unwrap();
        let mut prev = 0.0;
        for lam in [1.0, 0.1, 0.01] {
            let p = perturbed_crlb(&m, &boundary_approximation(&m, &s, lam).unwrap()).unwrap().finite().unwrap().clone();
            assert!((p[(0, 0)] - 1.0).abs() < 1e-12);
            assert!((p[(1, 1)] - (1.0 + 1.0 / (lam * lam))).abs() < 1e-6 * p[(1, 1)]);
            assert!(p[(1, 1)] > prev);
            prev = p[(1, 1)];
        }
        assert!(prev > 100.0);
    }

    #[test]
    fn padding_rectangular_blocks_keeps_bound() {
        let h = Mat::from_row_slice(3, 2, &[1.0, 0.2, 0.3, 1.0, -0.5, 0.7]);
        let r = Mat::from_row_slice(3, 3, &[1.0, 0.1, 0.0, 0.1, 2.0, 0.3, 0.0, 0.3, 1.5]);
        let m = SystemModel::new(h.clone(), r.clone(), None, Mat::identity(1, 2), vec![Mat::identity(1, 2)], vec![3]).unwrap();
        let c = Mat::from_row_slice(2, 3, &[1.0, 0.5, 0.0, 0.0, 1.0, -1.0]);
        let t = Mat::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]);
        let padded = Sanitization::from_rectangular_blocks(&[c.clone()], &[t.clone()]).unwrap();
        let direct = crlb::sanitized_information(&h, &r, &c, &t).unwrap();
        let pad_info = crlb::sanitized_information(&h, &r, padded.c(), padded.theta()).unwrap();
        assert!(linalg::rel_frob_diff(&pad_info, &direct) < 1e-12);
        assert!(perturbed_crlb(&m, &padded).unwrap().finite().is_some());
    }

    proptest! {
        #[test]
        fn apply_is_linear_without_noise(
            c in proptest::collection::vec(-2.0f64..2.0, 4),
            y1 in proptest::collection::vec(-2.0f64..2.0, 2),
            y2 in proptest::collection::vec(-2.0f64..2.0, 2),
            a in -3.0f64..3.0,
        ) {
            let s = Sanitization::new(&[2], Mat::from_row_slice(2, 2, &c), Mat::zeros(2, 2)).unwrap();
            let (y1, y2) = (Vector::from_vec(y1), Vector::from_vec(y2));
            let mut rng = ChaCha20Rng::seed_from_u64(0);
            let lhs = apply(&s, &(&y1 * a + &y2), &mut rng).unwrap();
            let rhs = apply(&s, &y1, &mut rng).unwrap() * a + apply(&s, &y2, &mut rng).unwrap();
            prop_assert!((lhs - rhs).amax() < 1e-12);
        }
    }
}
