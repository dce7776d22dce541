//! Cramér–Rao bounds before and after sanitization, and the utility and
//! privacy functionals built on them.
//!
//! The perturbed bound `P̃ = (J0 + HᵀCᵀ(CRCᵀ+Θ)⁻¹CH)⁻¹` is also available in
//! the pure-noise form `P̃ = P_x + Ψ Θ(I + ΦΘ)⁻¹ Ψᵀ`, with
//!
//! | case     | `Ψ`            | `Φ`                          |
//! |----------|----------------|------------------------------|
//! | no prior | `P_x Hᵀ R⁻¹`   | `R⁻¹ − R⁻¹ H P_x Hᵀ R⁻¹`     |
//! | prior    | `P0 Hᵀ Φ`      | `(H P0 Hᵀ + R)⁻¹`            |

use alloc::vec::Vec;

use nalgebra::Cholesky;

use crate::linalg::{self, Mat, OrthonormalBasis, Vector};
use crate::model::SystemModel;
use crate::sanitize::Sanitization;
use crate::{Error, Result};

/// Eigenvalues below this fraction of the largest count as zero when
/// deciding whether an information matrix is singular.
const INFO_RANK_TOL: f64 = 1e-13;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorCase {
    NoPrior,
    WithPrior,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrlbFactors {
    pub p_x: Mat,
    pub psi: Mat,
    pub phi: Mat,
    pub prior_case: PriorCase,
    /// `J0⁻¹`, prior case only.
    pub p0: Option<Mat>,
}

/// A perturbed bound. Destroying information along some direction (no prior)
/// makes the Fisher matrix singular; that is a legitimate outcome, kept with
/// its information matrix.
///
/// Weighted traces are evaluated from the spectrum of the information
/// matrix, `Σ_k ‖A w_k‖² / μ_k`, so a huge variance along one direction does
/// not swamp functionals that are blind to it.
#[derive(Debug, Clone, PartialEq)]
pub struct Crlb {
    bound: Option<Mat>,
    information: Mat,
    mu: Vector,
    w: Mat,
}

impl Crlb {
    /// Inverts an information matrix, reporting it unbounded when its
    /// smallest eigenvalue is below `1e-13` of its largest.
    pub fn from_information(info: Mat) -> Self {
        let information = linalg::symmetrize(&info);
        let (mu, w) = linalg::sym_eigen(&information);
        let lmax = mu.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let lmin = mu.iter().copied().fold(f64::INFINITY, f64::min);
        let bound = (lmax > 0.0 && lmin > INFO_RANK_TOL * lmax).then(|| linalg::sym_map_with(&mu, &w, |v| 1.0 / v));
        Self { bound, information, mu, w }
    }

    /// Wraps a finite, positive definite bound.
    pub fn from_bound(p: Mat) -> Result<Self> {
        let p = linalg::symmetrize(&p);
        let (nu, w) = linalg::sym_eigen(&p);
        if nu.len() > 0 && !(nu[0] > 0.0) {
            return Err(Error::InvariantViolation("a CRLB must be positive definite".into()));
        }
        let mu = nu.map(|v| 1.0 / v);
        Ok(Self { information: linalg::sym_map_with(&mu, &w, |v| v), bound: Some(p), mu, w })
    }

    pub fn finite(&self) -> Option<&Mat> {
        self.bound.as_ref()
    }

    pub fn is_unbounded(&self) -> bool {
        self.bound.is_none()
    }

    pub fn information(&self) -> &Mat {
        &self.information
    }

    /// `tr(A P̃ Aᵀ)`; `+∞` when a row of `A` leaves the range of the
    /// information matrix.
    pub fn weighted_trace(&self, a: &Mat) -> f64 {
        let lmax = self.mu.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let scale = a.norm().max(f64::MIN_POSITIVE);
        let aw = a * &self.w;
        let mut acc = 0.0;
        for k in 0..self.mu.len() {
            let col = aw.column(k).norm_squared();
            if self.bound.is_none() && (self.mu[k] <= INFO_RANK_TOL * lmax || self.mu[k] <= 0.0) {
                if libm::sqrt(col) > 1e-9 * scale {
                    return f64::INFINITY;
                }
            } else {
                acc += col / self.mu[k];
            }
        }
        acc
    }
}

/// `P_x = (J0 + HᵀR⁻¹H)⁻¹`.
pub fn baseline_crlb(model: &SystemModel) -> Result<Mat> {
    let rinv_h = linalg::spd_solve(model.r(), model.h(), "R")?;
    let mut info = model.h().transpose() * rinv_h;
    if let Some(j0) = model.j0() {
        info += j0;
    }
    linalg::spd_inverse(&info, "the Fisher information J0 + HᵀR⁻¹H")
}

pub fn crlb_factors(model: &SystemModel) -> Result<CrlbFactors> {
    let h = model.h();
    let p_x = baseline_crlb(model)?;
    match model.j0() {
        None => {
            // With R = LLᵀ and W = L⁻¹H = QR, Φ = L⁻ᵀ Q⊥ Q⊥ᵀ L⁻¹: exactly rank
            // N − L by construction instead of a cancelling difference.
            let chol = Cholesky::new(linalg::symmetrize(model.r())).ok_or_else(|| Error::SingularModel("R is not positive definite".into()))?;
            let l_low = chol.l();
            let w = l_low.solve_lower_triangular(h).ok_or_else(|| Error::SingularModel("R is singular".into()))?;
            let q = w.qr().q();
            let full = linalg::complete_unitary(&OrthonormalBasis::new(q).map_err(|_| Error::SingularModel("H is rank deficient".into()))?)?;
            let q_perp = full.columns(h.ncols(), h.nrows() - h.ncols()).into_owned();
            let b = l_low.transpose().solve_upper_triangular(&q_perp).ok_or_else(|| Error::SingularModel("R is singular".into()))?;
            let phi = linalg::symmetrize(&(&b * b.transpose()));
            let psi = &p_x * linalg::spd_solve(model.r(), h, "R")?.transpose();
            Ok(CrlbFactors { p_x, psi, phi, prior_case: PriorCase::NoPrior, p0: None })
        }
        Some(j0) => {
            let p0 = linalg::spd_inverse(j0, "J0")?;
            let innov = h * &p0 * h.transpose() + model.r();
            let phi = linalg::spd_inverse(&innov, "HP0Hᵀ + R")?;
            let psi = &p0 * h.transpose() * &phi;
            Ok(CrlbFactors { p_x, psi, phi, prior_case: PriorCase::WithPrior, p0: Some(p0) })
        }
    }
}

/// `HᵀCᵀ(CRCᵀ+Θ)⁻¹CH`, the information carried by sanitized measurements.
///
/// `C` may be rectangular. When `CRCᵀ+Θ` is singular (zero rows of `C` with
/// zero noise, as produced by padding) its pseudo-inverse is used: with
/// `R ≻ 0` the null space of `CRCᵀ+Θ` is orthogonal to the range of `CH`.
pub fn sanitized_information(h: &Mat, r: &Mat, c: &Mat, theta: &Mat) -> Result<Mat> {
    let ch = c * h;
    let crc = c * r * c.transpose();
    let m = linalg::symmetrize(&(&crc + theta));
    if m.nrows() == 0 {
        return Ok(Mat::zeros(h.ncols(), h.ncols()));
    }
    // An eigendecomposition keeps the well-observed directions accurate when
    // Θ dwarfs R (a Cholesky solve loses ~‖Θ‖·ε there). Null directions are
    // judged against ‖CRCᵀ‖ plus the eigensolver's round-off on ‖M‖.
    let (vals, vecs) = linalg::sym_eigen(&m);
    let lmax = vals.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if vals[0] < -1e-10 * lmax.max(1.0) {
        return Err(Error::DegenerateSanitization("CRCᵀ + Θ is indefinite".into()));
    }
    let cut = 1e-12 * linalg::spectral_norm(&crc) + 1e-14 * lmax;
    let inv = vals.map(|v| if v > cut { 1.0 / v } else { 0.0 });
    let proj = vecs.transpose() * &ch;
    let mut weighted = proj.clone();
    for (k, mut row) in weighted.row_iter_mut().enumerate() {
        row *= inv[k];
    }
    Ok(linalg::symmetrize(&(proj.transpose() * weighted)))
}

/// `J̃ = J0 + HᵀCᵀ(CRCᵀ+Θ)⁻¹CH`.
pub fn perturbed_information(model: &SystemModel, s: &Sanitization) -> Result<Mat> {
    check_sanitization(model, s)?;
    let mut info = sanitized_information(model.h(), model.r(), s.c(), s.theta())?;
    if let Some(j0) = model.j0() {
        info += j0;
    }
    Ok(info)
}

fn check_sanitization(model: &SystemModel, s: &Sanitization) -> Result<()> {
    if s.n() != model.n() {
        return Err(Error::DimensionMismatch { field: "sanitization".into(), detail: alloc::format!("N = {} for a model with N = {}", s.n(), model.n()) });
    }
    Ok(())
}

pub fn perturbed_crlb(model: &SystemModel, s: &Sanitization) -> Result<Crlb> {
    Ok(Crlb::from_information(perturbed_information(model, s)?))
}

/// `Θ(I + ΦΘ)⁻¹`, evaluated as `Θ^{1/2}(I + Θ^{1/2}ΦΘ^{1/2})⁻¹Θ^{1/2}` so it
/// stays symmetric and accurate for very large noise.
pub fn noise_gain(theta: &Mat, phi: &Mat) -> Result<Mat> {
    let n = theta.nrows();
    if n == 0 {
        return Ok(Mat::zeros(0, 0));
    }
    let sq = linalg::psd_sqrt(theta);
    let inner = linalg::symmetrize(&(Mat::identity(n, n) + &sq * phi * &sq));
    let solved = linalg::spd_solve(&inner, &sq, "I + Θ^{1/2}ΦΘ^{1/2}")
        .map_err(|_| Error::InvariantViolation("I + Θ^{1/2}ΦΘ^{1/2} is not positive definite".into()))?;
    Ok(linalg::symmetrize(&(&sq * solved)))
}

/// `P_x + Ψ Θ(I + ΦΘ)⁻¹ Ψᵀ` (compression fixed to the identity).
pub fn perturbed_crlb_decomposed(factors: &CrlbFactors, theta: &Mat) -> Result<Mat> {
    let n = factors.phi.nrows();
    if theta.shape() != (n, n) {
        return Err(Error::DimensionMismatch { field: "Theta".into(), detail: alloc::format!("expected {n}×{n}") });
    }
    linalg::check_symmetric(theta, "Theta")?;
    let gain = noise_gain(theta, &factors.phi)?;
    Ok(linalg::symmetrize(&(&factors.p_x + &factors.psi * gain * factors.psi.transpose())))
}

/// `1 − tr(U P̃ Uᵀ) / tr(U P_x Uᵀ)` from precomputed bounds.
pub fn utility_from(model: &SystemModel, p_x: &Mat, p_tilde: &Crlb) -> Result<f64> {
    let base = linalg::weighted_trace(model.u(), p_x);
    if !(base > 0.0) {
        return Err(Error::DegeneratePublicMap);
    }
    let pert = p_tilde.weighted_trace(model.u());
    Ok(if pert.is_infinite() { f64::NEG_INFINITY } else { 1.0 - pert / base })
}

/// `tr(G_i P̃ G_iᵀ) / tr(G_i P_x G_iᵀ) − 1` from precomputed bounds (0 for `G_i = 0`).
pub fn privacy_from(model: &SystemModel, p_x: &Mat, p_tilde: &Crlb, i: usize) -> Result<f64> {
    model.agent_slice(i)?;
    if model.g_is_zero(i) {
        return Ok(0.0);
    }
    let g = &model.g()[i];
    let base = linalg::weighted_trace(g, p_x);
    let pert = p_tilde.weighted_trace(g);
    Ok(if pert.is_infinite() { f64::INFINITY } else { pert / base - 1.0 })
}

pub fn utility(model: &SystemModel, s: &Sanitization) -> Result<f64> {
    utility_from(model, &baseline_crlb(model)?, &perturbed_crlb(model, s)?)
}

pub fn privacy(model: &SystemModel, s: &Sanitization, i: usize) -> Result<f64> {
    privacy_from(model, &baseline_crlb(model)?, &perturbed_crlb(model, s)?, i)
}

/// Supremum of attainable privacy: the prior alone bounds the error.
pub fn eps_max_from(model: &SystemModel, factors: &CrlbFactors, i: usize) -> Result<f64> {
    model.agent_slice(i)?;
    if model.g_is_zero(i) {
        return Ok(0.0);
    }
    match &factors.p0 {
        None => Ok(f64::INFINITY),
        Some(p0) => {
            let g = &model.g()[i];
            Ok(linalg::weighted_trace(g, p0) / linalg::weighted_trace(g, &factors.p_x) - 1.0)
        }
    }
}

pub fn eps_max(model: &SystemModel, i: usize) -> Result<f64> {
    eps_max_from(model, &crlb_factors(model)?, i)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TradeoffReport {
    pub utility: f64,
    pub privacy: Vec<f64>,
    pub p_x: Mat,
    pub p_tilde: Crlb,
    pub eps_max: Vec<f64>,
}

pub fn tradeoff_report(model: &SystemModel, s: &Sanitization) -> Result<TradeoffReport> {
    let factors = crlb_factors(model)?;
    let p_x = baseline_crlb(model)?;
    let p_tilde = perturbed_crlb(model, s)?;
    let utility = utility_from(model, &p_x, &p_tilde)?;
    let privacy = (0..model.agents()).map(|i| privacy_from(model, &p_x, &p_tilde, i)).collect::<Result<Vec<_>>>()?;
    let eps_max = (0..model.agents()).map(|i| eps_max_from(model, &factors, i)).collect::<Result<Vec<_>>>()?;
    Ok(TradeoffReport { utility, privacy, p_x, p_tilde, eps_max })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::linalg::{rel_frob_diff, Tolerance, Vector};
    use alloc::vec;
    use proptest::prelude::*;

    pub fn m1(x: f64) -> Mat {
        Mat::from_element(1, 1, x)
    }

    pub fn diag(v: &[f64]) -> Mat {
        Mat::from_diagonal(&Vector::from_row_slice(v))
    }

    pub fn fixture_3x2(u: &[f64], g: &[f64], dims: Vec<usize>) -> SystemModel {
        let h = Mat::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let gs = dims.iter().map(|_| Mat::from_row_slice(1, 2, g)).collect();
        SystemModel::new(h, Mat::identity(3, 3), None, Mat::from_row_slice(1, 2, u), gs, dims).unwrap()
    }

    pub fn prior_2x2(u: &[f64], g: &[f64]) -> SystemModel {
        SystemModel::new(Mat::identity(2, 2), Mat::identity(2, 2), Some(Mat::identity(2, 2)), Mat::from_row_slice(1, 2, u), vec![Mat::from_row_slice(1, 2, g)], vec![2]).unwrap()
    }

    fn scalar(j0: Option<f64>) -> SystemModel {
        SystemModel::new(m1(1.0), m1(1.0), j0.map(m1), m1(1.0), vec![m1(1.0)], vec![1]).unwrap()
    }

    fn noise(m: &SystemModel, theta: Mat) -> Sanitization {
        Sanitization::noise_only(m.agent_dims(), theta).unwrap()
    }

    #[test]
    fn baseline_examples() {
        assert_eq!(baseline_crlb(&scalar(None)).unwrap(), m1(1.0));
        let m = prior_2x2(&[1.0, 0.0], &[0.0, 1.0]);
        assert!((baseline_crlb(&m).unwrap() - Mat::identity(2, 2) * 0.5).amax() < 1e-15);
        let m = SystemModel::new(Mat::from_row_slice(2, 1, &[1.0, 0.0]), Mat::identity(2, 2), None, m1(1.0), vec![m1(1.0)], vec![2]).unwrap();
        assert!((baseline_crlb(&m).unwrap()[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn factor_examples() {
        let m = SystemModel::new(Mat::identity(2, 2), Mat::identity(2, 2), None, Mat::identity(1, 2), vec![Mat::identity(1, 2)], vec![2]).unwrap();
        let f = crlb_factors(&m).unwrap();
        assert!((f.psi.clone() - Mat::identity(2, 2)).amax() < 1e-15 && f.phi.amax() < 1e-15);

        let f = crlb_factors(&prior_2x2(&[1.0, 0.0], &[0.0, 1.0])).unwrap();
        assert!((f.phi.clone() - Mat::identity(2, 2) * 0.5).amax() < 1e-15);
        assert!((f.psi.clone() - Mat::identity(2, 2) * 0.5).amax() < 1e-15);
        assert_eq!(f.prior_case, PriorCase::WithPrior);

        let f = crlb_factors(&fixture_3x2(&[1.0, 0.0], &[0.0, 1.0], vec![3])).unwrap();
        let ht = Mat::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert!((f.psi.clone() - ht).amax() < 1e-15);
        assert!((f.phi.clone() - diag(&[0.0, 0.0, 1.0])).amax() < 1e-15);
    }

    #[test]
    fn perturbed_examples() {
        let m = fixture_3x2(&[1.0, 0.0], &[0.0, 1.0], vec![3]);
        let p = perturbed_crlb(&m, &Sanitization::identity(3)).unwrap();
        assert!(rel_frob_diff(p.finite().unwrap(), &baseline_crlb(&m).unwrap()) < 1e-15);

        let s = scalar(None);
        assert!((perturbed_crlb(&s, &noise(&s, m1(1.0))).unwrap().finite().unwrap()[(0, 0)] - 2.0).abs() < 1e-15);
        let s = scalar(Some(1.0));
        assert!((perturbed_crlb(&s, &noise(&s, m1(1.0))).unwrap().finite().unwrap()[(0, 0)] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn decomposed_examples() {
        let m = prior_2x2(&[1.0, 0.0], &[0.0, 1.0]);
        let f = crlb_factors(&m).unwrap();
        assert!(rel_frob_diff(&perturbed_crlb_decomposed(&f, &Mat::zeros(2, 2)).unwrap(), &f.p_x) < 1e-15);
        let p = perturbed_crlb_decomposed(&f, &Mat::identity(2, 2)).unwrap();
        assert!((p - Mat::identity(2, 2) * (2.0 / 3.0)).amax() < 1e-14);

        let m = fixture_3x2(&[1.0, 0.0], &[0.0, 1.0], vec![3]);
        let f = crlb_factors(&m).unwrap();
        for lam in [0.5, 3.0, 1e6] {
            let p = perturbed_crlb_decomposed(&f, &diag(&[0.0, lam, 0.0])).unwrap();
            assert!(rel_frob_diff(&p, &diag(&[1.0, 1.0 + lam])) < 1e-12);
        }
    }

    #[test]
    fn utility_privacy_examples() {
        let s = scalar(None);
        assert_eq!(utility(&s, &Sanitization::identity(1)).unwrap(), 0.0);
        assert_eq!(privacy(&s, &Sanitization::identity(1), 0).unwrap(), 0.0);
        assert!((utility(&s, &noise(&s, m1(1.0))).unwrap() + 1.0).abs() < 1e-15);
        assert!((privacy(&s, &noise(&s, m1(1.0)), 0).unwrap() - 1.0).abs() < 1e-15);

        // destroyed information: C = 0 without a prior
        let gone = Sanitization::new(&[1], m1(0.0), m1(0.0)).unwrap();
        assert_eq!(utility(&s, &gone).unwrap(), f64::NEG_INFINITY);
        assert_eq!(privacy(&s, &gone, 0).unwrap(), f64::INFINITY);

        let zero_u = s.with_u(m1(0.0)).unwrap();
        assert_eq!(utility(&zero_u, &Sanitization::identity(1)), Err(Error::DegeneratePublicMap));
    }

    #[test]
    fn zero_private_map() {
        let m = SystemModel::new(Mat::identity(2, 1), Mat::identity(2, 2), None, m1(1.0), vec![m1(1.0), m1(0.0)], vec![1, 1]).unwrap();
        let s = Sanitization::noise_only(&[1, 1], Mat::identity(2, 2)).unwrap();
        assert_eq!(privacy(&m, &s, 1).unwrap(), 0.0);
        assert_eq!(eps_max(&m, 1).unwrap(), 0.0);
        assert_eq!(eps_max(&m, 0).unwrap(), f64::INFINITY);
    }

    #[test]
    fn eps_max_scalar() {
        assert!((eps_max(&scalar(Some(1.0)), 0).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn report_matches_individual_calls_bitwise() {
        let m = fixture_3x2(&[1.0, 0.0], &[0.0, 1.0], vec![1, 2]);
        let s = Sanitization::noise_only(&[1, 2], diag(&[0.0, 4.0, 0.0])).unwrap();
        let r = tradeoff_report(&m, &s).unwrap();
        assert_eq!(r.utility.to_bits(), utility(&m, &s).unwrap().to_bits());
        for i in 0..2 {
            assert_eq!(r.privacy[i].to_bits(), privacy(&m, &s, i).unwrap().to_bits());
        }
        assert!(r.utility.abs() < 1e-15 && (r.privacy[1] - 4.0).abs() < 1e-12);

        let gone = Sanitization::new(&[1, 2], Mat::zeros(3, 3), Mat::zeros(3, 3)).unwrap();
        let r = tradeoff_report(&m, &gone).unwrap();
        assert_eq!(r.utility, f64::NEG_INFINITY);
        assert!(r.privacy.iter().all(|p| p.is_infinite()));

        let pm = prior_2x2(&[1.0, 0.0], &[0.0, 1.0]);
        let r = tradeoff_report(&pm, &Sanitization::new(&[2], Mat::zeros(2, 2), Mat::zeros(2, 2)).unwrap()).unwrap();
        assert!((r.privacy[0] - r.eps_max[0]).abs() < 1e-12);
    }

    // ---- random instances -------------------------------------------------

    /// Random block-diagonal PSD matrix, each block of rank up to its size.
    pub fn random_block_psd(dims: &[usize], v: &[f64], scale: f64) -> Mat {
        let mut blocks = Vec::new();
        let mut k = 0;
        for &d in dims {
            let a = Mat::from_row_slice(d, d, &v[k..k + d * d]);
            k += d * d;
            // zero a column now and then to get singular blocks
            let mut a = a;
            if v[k % v.len()] > 0.5 {
                a.column_mut(0).fill(0.0);
            }
            blocks.push(&a * a.transpose() * scale);
        }
        linalg::block_diag(&blocks)
    }

    prop_compose! {
        pub fn random_model(max_n: usize, max_l: usize, max_s: usize)
            (s in 1..=max_s, l in 1..=max_l, extra in 0usize..6, prior in any::<bool>())
            (dims in proptest::collection::vec(1usize..=(max_n / s).max(1), s),
             l in Just(l), prior in Just(prior), extra in Just(extra),
             data in proptest::collection::vec(-1.0f64..1.0, 3 * 144 + 400))
            -> SystemModel
        {
            let _ = extra;
            let mut dims = dims;
            let n0: usize = dims.iter().sum();
            if !prior && n0 < l {
                dims[0] += l - n0;
            }
            let n: usize = dims.iter().sum();
            let mut it = data.iter().copied().cycle();
            let mut take = |r: usize, c: usize| Mat::from_iterator(c, r, it.by_ref().take(r * c)).transpose();
            let mut h = take(n, l);
            for k in 0..l.min(n) { h[(k, k)] += 1.5; }
            let ra = take(n, n);
            let r = &ra * ra.transpose() + Mat::identity(n, n) * 0.1;
            let j0 = prior.then(|| { let a = take(l, l); &a * a.transpose() + Mat::identity(l, l) * 0.1 });
            let u = take(2.min(l), l);
            let g = dims.iter().map(|_| { let mut g = take(1, l); g[(0, 0)] += 1.5; g }).collect();
            SystemModel::new(h, r, j0, u, g, dims).unwrap()
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn decomposition_identity(m in random_model(12, 6, 3), v in proptest::collection::vec(-1.0f64..1.0, 200), scale in 0.01f64..10.0) {
            let theta = random_block_psd(m.agent_dims(), &v, scale);
            let s = Sanitization::noise_only(m.agent_dims(), theta.clone()).unwrap();
            let direct = perturbed_crlb(&m, &s).unwrap();
            let decomposed = perturbed_crlb_decomposed(&crlb_factors(&m).unwrap(), &theta).unwrap();
            prop_assert!(rel_frob_diff(&decomposed, direct.finite().unwrap()) < 1e-8);
        }

        #[test]
        fn monotone_in_noise(m in random_model(10, 4, 3), v in proptest::collection::vec(-1.0f64..1.0, 200), w in proptest::collection::vec(-1.0f64..1.0, 200)) {
            let t = random_block_psd(m.agent_dims(), &v, 1.0);
            let t2 = &t + random_block_psd(m.agent_dims(), &w, 0.5);
            let s1 = Sanitization::noise_only(m.agent_dims(), t).unwrap();
            let s2 = Sanitization::noise_only(m.agent_dims(), t2).unwrap();
            let p1 = perturbed_crlb(&m, &s1).unwrap().finite().unwrap().clone();
            let p2 = perturbed_crlb(&m, &s2).unwrap().finite().unwrap().clone();
            let d = &p2 - &p1;
            prop_assert!(linalg::lambda_min(&d) >= -1e-9 * p2.norm().max(1.0));
            prop_assert!(utility(&m, &s2).unwrap() <= utility(&m, &s1).unwrap() + 1e-9);
            for i in 0..m.agents() {
                prop_assert!(privacy(&m, &s2, i).unwrap() >= privacy(&m, &s1, i).unwrap() - 1e-9);
            }
        }

        #[test]
        fn compression_invariance(m in random_model(8, 4, 2), v in proptest::collection::vec(-1.0f64..1.0, 200), a in proptest::collection::vec(-1.0f64..1.0, 200)) {
            // J̃(AC, Θ) = J̃(C, A⁻¹ΘA⁻ᵀ) for invertible block-diagonal A
            let dims = m.agent_dims();
            let c = random_block_psd(dims, &a[100..], 1.0) + Mat::identity(m.n(), m.n());
            let theta = random_block_psd(dims, &v, 1.0);
            let amat = random_block_psd(dims, &a, 1.0) + Mat::identity(m.n(), m.n()) * 0.5;
            let ainv = amat.clone().try_inverse().unwrap();
            let lhs = sanitized_information(m.h(), m.r(), &(&amat * &c), &theta).unwrap();
            let rhs = sanitized_information(m.h(), m.r(), &c, &(&ainv * &theta * ainv.transpose())).unwrap();
            prop_assert!(rel_frob_diff(&lhs, &rhs) < 1e-9);
        }

        #[test]
        fn no_prior_phi_structure(m in random_model(12, 5, 3)) {
            prop_assume!(!m.has_prior());
            let f = crlb_factors(&m).unwrap();
            prop_assert_eq!(linalg::rank_tol(&f.phi, &Tolerance::default()).unwrap(), m.n() - m.l());
            let ph = &f.phi * m.h() * &f.p_x;
            prop_assert!(ph.norm() <= 1e-9 * f.phi.norm().max(1.0) * m.h().norm() * f.p_x.norm());
            prop_assert!(linalg::is_psd(&f.phi, &Tolerance::default()).unwrap());
        }

        #[test]
        fn prior_privacy_below_eps_max(m in random_model(10, 4, 3), v in proptest::collection::vec(-1.0f64..1.0, 200), scale in 0.1f64..1e4) {
            prop_assume!(m.has_prior());
            let theta = random_block_psd(m.agent_dims(), &v, scale);
            let s = Sanitization::noise_only(m.agent_dims(), theta).unwrap();
            let r = tradeoff_report(&m, &s).unwrap();
            for i in 0..m.agents() {
                prop_assert!(r.privacy[i] <= r.eps_max[i] + 1e-6);
                prop_assert!(r.privacy[i] >= -1e-9);
            }
            prop_assert!(r.utility <= 1e-9);
        }
    }
}
