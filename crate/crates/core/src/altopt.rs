//! Alternating per-agent optimization of the utility-privacy tradeoff.
//!
//! Holding every other agent's noise fixed, agent `i`'s influence on the
//! bound enters through `Z = (Θ̄_i + Ω)⁻¹` only (`Θ̄_i = Θ_i⁻¹`):
//!
//! ```text
//! u   = −tr(Γ_u Z) / tr(U P_x Uᵀ)  − Δ_u
//! p_j =  tr(Γ_pj Z) / tr(G_j P_x G_jᵀ) + Δ_pj
//! ```
//!
//! so each block update is a small SDP in `Z`. Noise is stored as `Θ_i`
//! (not `Θ̄_i`); "no noise" and "maximal noise" are then both finite, the
//! latter capped at `1/μ`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::crlb::{self, CrlbFactors, TradeoffReport};
use crate::linalg::{self, Mat, Vector};
use crate::model::{PrivacyRequest, SystemModel};
use crate::sanitize::Sanitization;
use crate::sdp::{self, SdpOptions, SdpProblem, SdpStatus};
use crate::{Error, Result};

/// Model quantities with agent `i`'s rows placed first.
#[derive(Debug, Clone, PartialEq)]
pub struct PermutedModel {
    /// `perm[k]` is the original index of row `k`.
    pub perm: Vec<usize>,
    pub h: Mat,
    pub r: Mat,
    pub psi: Mat,
    pub phi: Mat,
}

pub fn permute_for_agent(model: &SystemModel, i: usize) -> Result<PermutedModel> {
    let s = model.agent_slice(i)?;
    let perm: Vec<usize> = s.range().chain((0..model.n()).filter(|k| !s.range().contains(k))).collect();
    let n = model.n();
    let h = Mat::from_fn(n, model.l(), |a, b| model.h()[(perm[a], b)]);
    let r = Mat::from_fn(n, n, |a, b| model.r()[(perm[a], perm[b])]);
    // agent i first, the others in their original order
    let order: Vec<usize> = core::iter::once(i).chain((0..model.agents()).filter(|&j| j != i)).collect();
    let dims = order.iter().map(|&j| model.agent_dims()[j]).collect();
    let gs = order.iter().map(|&j| model.g()[j].clone()).collect();
    let permuted = SystemModel::new(h.clone(), r.clone(), model.j0().cloned(), model.u().clone(), gs, dims)?;
    let f = crlb::crlb_factors(&permuted)?;
    Ok(PermutedModel { perm, h, r, psi: f.psi, phi: f.phi })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockTerms {
    pub gamma_u: Mat,
    pub gamma_p: Vec<Mat>,
    pub omega: Mat,
    pub delta_u: f64,
    pub delta_p: Vec<f64>,
    /// `Θ_o (I + Φ_oo Θ_o)⁻¹` over the other agents' coordinates.
    pub t: Mat,
}

fn submatrix(a: &Mat, rows: &[usize], cols: &[usize]) -> Mat {
    Mat::from_fn(rows.len(), cols.len(), |p, q| a[(rows[p], cols[q])])
}

fn columns(a: &Mat, cols: &[usize]) -> Mat {
    Mat::from_fn(a.nrows(), cols.len(), |p, q| a[(p, cols[q])])
}

/// Block constants for agent `i` given every agent's current noise `Θ_j`
/// (entry `i` is ignored).
pub fn block_terms(model: &SystemModel, factors: &CrlbFactors, i: usize, thetas: &[Mat]) -> Result<BlockTerms> {
    let s = model.agent_slice(i)?;
    if thetas.len() != model.agents() {
        return Err(Error::DimensionMismatch { field: "thetas".into(), detail: format!("expected {} blocks", model.agents()) });
    }
    let own: Vec<usize> = s.range().collect();
    let others: Vec<usize> = (0..model.n()).filter(|k| !s.range().contains(k)).collect();
    let mut theta_o = Mat::zeros(others.len(), others.len());
    let mut at = 0;
    for (j, th) in thetas.iter().enumerate() {
        if j == i {
            continue;
        }
        let d = model.agent_dims()[j];
        if th.shape() != (d, d) {
            return Err(Error::DimensionMismatch { field: format!("theta[{j}]"), detail: format!("expected {d}×{d}") });
        }
        theta_o.view_mut((at, at), (d, d)).copy_from(th);
        at += d;
    }
    let phi_aa = submatrix(&factors.phi, &own, &own);
    let phi_ab = submatrix(&factors.phi, &own, &others);
    let phi_bb = submatrix(&factors.phi, &others, &others);
    let t = if others.is_empty() { Mat::zeros(0, 0) } else { crlb::noise_gain(&theta_o, &phi_bb)? };
    let omega = linalg::symmetrize(&(&phi_aa - &phi_ab * &t * phi_ab.transpose()));
    let psi_a = columns(&factors.psi, &own);
    let psi_b = columns(&factors.psi, &others);
    let e = &psi_a - &psi_b * &t * phi_ab.transpose();
    let base_u = linalg::weighted_trace(model.u(), &factors.p_x);
    if !(base_u > 0.0) {
        return Err(Error::DegeneratePublicMap);
    }
    let ue = model.u() * &e;
    let gamma_u = linalg::symmetrize(&(ue.transpose() * &ue));
    let delta_u = linalg::weighted_trace(&(model.u() * &psi_b), &t) / base_u;
    let mut gamma_p = Vec::new();
    let mut delta_p = Vec::new();
    for j in 0..model.agents() {
        let g = &model.g()[j];
        let ge = g * &e;
        gamma_p.push(linalg::symmetrize(&(ge.transpose() * &ge)));
        let base = linalg::weighted_trace(g, &factors.p_x);
        delta_p.push(if model.g_is_zero(j) { 0.0 } else { linalg::weighted_trace(&(g * &psi_b), &t) / base });
    }
    Ok(BlockTerms { gamma_u, gamma_p, omega, delta_u, delta_p, t })
}

impl BlockTerms {
    /// `(u, p)` when agent `i`'s noise yields `Z`.
    pub fn evaluate(&self, model: &SystemModel, p_x: &Mat, z: &Mat) -> (f64, Vec<f64>) {
        let u = -self.gamma_u.dot(z) / linalg::weighted_trace(model.u(), p_x) - self.delta_u;
        let p = (0..model.agents())
            .map(|j| if model.g_is_zero(j) { 0.0 } else { self.gamma_p[j].dot(z) / linalg::weighted_trace(&model.g()[j], p_x) + self.delta_p[j] })
            .collect();
        (u, p)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AltOptOptions {
    pub max_iters: usize,
    /// Sweep-to-sweep utility change below which the run stops.
    pub utility_tol: f64,
    /// `μ = mu_rel · tr(R) / N` regularizes `Ω` and caps noise at `1/μ`.
    pub mu_rel: f64,
    /// Among utility-optimal `Z`, prefer the most private one (or, when every
    /// threshold is zero, the least noisy one).
    pub tie_break: bool,
    /// Free privacy is harvested only up to `Z ⪯ (Ω + μ_h I)⁻¹` with
    /// `μ_h = harvest_rel · tr(R) / N`; noise near `1/μ` is below the
    /// precision at which utility can be certified.
    pub harvest_rel: f64,
    pub sdp: SdpOptions,
}

impl Default for AltOptOptions {
    fn default() -> Self {
        Self { max_iters: 30, utility_tol: 1e-6, mu_rel: 1e-10, tie_break: true, harvest_rel: 1e-6, sdp: SdpOptions::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockStatus {
    Accepted,
    /// The block problem was infeasible; the previous noise was kept.
    InfeasibleKept,
    /// The solver failed to converge; the previous noise was kept.
    SolverFailedKept,
    /// The solution was worse than the current (feasible) noise, which only
    /// solver inaccuracy can cause; the previous noise was kept.
    NoImprovementKept,
}

impl BlockStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            BlockStatus::Accepted => "ok",
            BlockStatus::InfeasibleKept => "infeasible-kept",
            BlockStatus::SolverFailedKept => "solver-failed-kept",
            BlockStatus::NoImprovementKept => "no-improvement-kept",
        }
    }
}

/// One record per block solve.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    /// 1-based sweep number.
    pub iteration: usize,
    pub agent: usize,
    pub utility: f64,
    pub privacy: Vec<f64>,
    pub status: BlockStatus,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AltOptTrace {
    pub records: Vec<TraceRecord>,
    pub sweeps: usize,
    pub converged: bool,
}

impl AltOptTrace {
    /// Utility after each full sweep.
    pub fn sweep_utilities(&self) -> Vec<f64> {
        (1..=self.sweeps).filter_map(|it| self.records.iter().rev().find(|r| r.iteration == it).map(|r| r.utility)).collect()
    }

    /// `iteration,agent,utility,p_1..p_S,status`, agents 0-based.
    pub fn to_csv(&self, agents: usize) -> String {
        let mut out = String::from("iteration,agent,utility");
        for j in 1..=agents {
            out.push_str(&format!(",p_{j}"));
        }
        out.push_str(",status\n");
        for r in &self.records {
            out.push_str(&format!("{},{},{:e}", r.iteration, r.agent, r.utility));
            for p in &r.privacy {
                out.push_str(&format!(",{p:e}"));
            }
            out.push_str(&format!(",{}\n", r.status.as_str()));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BlockOutcome {
    /// `fallback` is the utility-optimal point the tie-break started from.
    /// Both are optimal up to solver accuracy; with `prefer_private` the
    /// caller keeps whichever leaves more privacy, otherwise `theta` unless
    /// it fails the thresholds once recovered.
    Solved { theta: Mat, z: Mat, fallback: Option<Mat>, prefer_private: bool },
    Infeasible,
    SolverFailed(String),
}

/// Factors tried on a block solution whose privacy falls marginally short.
const INFLATION: [f64; 6] = [1.0, 1.0 + 1e-7, 1.0 + 1e-6, 1.0 + 1e-5, 1.0 + 1e-4, 1.0 + 1e-3];

fn mu_of(model: &SystemModel, opts: &AltOptOptions) -> f64 {
    opts.mu_rel * model.r().trace() / model.n() as f64
}

/// Inverse of `Z ↦ Θ(I+ΩΘ)⁻¹` on `0 ⪯ Z ⪯ (Ω+μI)⁻¹`, so `Θ ⪯ I/μ`.
///
/// Works in `Y = S⁻¹ZS⁻¹` with `S = (Ω+μI)^{-1/2}`, where the bounds become
/// `0 ⪯ Y ⪯ I` and `Θ = S Y^{1/2}(I − Y^{1/2}AY^{1/2})⁻¹Y^{1/2} S` with
/// `A = SΩS` diagonal; this keeps the huge-noise directions from leaking
/// rounding error into the others.
pub fn recover_theta(z: &Mat, omega: &Mat, mu: f64) -> Mat {
    let n = z.nrows();
    let (w, v) = linalg::sym_eigen(omega);
    let s = Vector::from_iterator(n, w.iter().map(|&x| 1.0 / libm::sqrt(x.max(0.0) + mu)));
    let a = Mat::from_diagonal(&Vector::from_iterator(n, w.iter().map(|&x| x.max(0.0) / (x.max(0.0) + mu))));
    let d_inv = Mat::from_diagonal(&s.map(|x| 1.0 / x));
    let y = linalg::sym_map(&(&d_inv * v.transpose() * z * &v * &d_inv), |l| l.clamp(0.0, 1.0));
    let ys = linalg::psd_sqrt(&y);
    let inner = linalg::symmetrize(&(Mat::identity(n, n) - &ys * a * &ys));
    let inv = linalg::sym_map(&inner, |l| 1.0 / l.max(f64::MIN_POSITIVE));
    let d = Mat::from_diagonal(&s);
    let theta_v = &d * &ys * inv * &ys * &d;
    linalg::sym_map(&(&v * theta_v * v.transpose()), |l| l.clamp(0.0, 1.0 / mu))
}

/// Minimizes agent `i`'s utility loss subject to every privacy threshold,
/// others fixed: `min tr(Γ_u Z)` s.t. `tr(Γ_pj Z) ≥ ε′_j`, `0 ⪯ Z ⪯ (Ω+μI)⁻¹`.
pub fn solve_agent_block(model: &SystemModel, terms: &BlockTerms, eps: &PrivacyRequest, p_x: &Mat, opts: &AltOptOptions) -> Result<BlockOutcome> {
    let n_i = terms.omega.nrows();
    let mu = mu_of(model, opts);
    let upper = |m: f64| linalg::sym_map(&terms.omega, |v| 1.0 / (v.max(0.0) + m));
    let targets: Vec<(usize, f64)> = (0..model.agents())
        .filter(|&j| !model.g_is_zero(j))
        .map(|j| (j, (eps.eps[j] - terms.delta_p[j]) * linalg::weighted_trace(&model.g()[j], p_x)))
        .filter(|&(_, t)| t > 0.0)
        .collect();
    let base = |cap: Mat| {
        let mut p = SdpProblem::new();
        let z = p.add_block(n_i);
        p.add_lmi(cap).term(z, -1.0, Mat::identity(n_i, n_i));
        for &(j, t) in &targets {
            p.add_inequality_le(vec![(z, -terms.gamma_p[j].clone())], -t);
        }
        (p, z)
    };
    let (mut primary, z) = base(upper(mu));
    primary.add_objective(z, -terms.gamma_u.clone());
    let first = sdp::solve_sdp(&primary, &opts.sdp)?;
    let zm = match first.status {
        SdpStatus::Optimal => first.blocks[0].clone(),
        SdpStatus::Infeasible => return Ok(BlockOutcome::Infeasible),
        SdpStatus::MaxIter | SdpStatus::Unbounded => {
            let k = first.kkt_residuals;
            // a stalled but primal-feasible point is still a candidate; the
            // caller checks it against the thresholds and the current utility
            if k.primal > 1e-6 || k.gap > 1e-3 {
                return Ok(BlockOutcome::SolverFailed(format!("{:?} {k:?}", first.status)));
            }
            first.blocks[0].clone()
        }
    };
    let mut fallback = None;
    let mut prefer_private = false;
    let mut zm = zm;
    if opts.tie_break && linalg::rank_tol(&terms.gamma_u, &Default::default())? < n_i {
        // the utility-optimal face is not a point: take the most private Z on
        // it, so that the other agents' thresholds gain slack; with no
        // threshold at all, the least noisy one
        let bound = terms.gamma_u.dot(&zm) + 1e-8 * linalg::weighted_trace(model.u(), p_x);
        let harvest = eps.eps.iter().any(|&e| e > 0.0);
        let (mut second, z) = if !harvest { base(upper(mu)) } else { base(upper(opts.harvest_rel * model.r().trace() / model.n() as f64)) };
        second.add_inequality_le(vec![(z, terms.gamma_u.clone())], bound);
        if !harvest {
            second.add_objective(z, -Mat::identity(n_i, n_i));
        } else {
            let mut all = Mat::zeros(n_i, n_i);
            for g in &terms.gamma_p {
                all += g;
            }
            second.add_objective(z, all);
        }
        let sol = sdp::solve_sdp(&second, &opts.sdp)?;
        let k = sol.kkt_residuals;
        if sol.status == SdpStatus::Optimal || (sol.status == SdpStatus::MaxIter && k.primal.max(k.dual).max(k.gap) <= 1e-4) {
            fallback = Some(recover_theta(&linalg::psd_project(&zm), &terms.omega, mu));
            prefer_private = harvest;
            zm = sol.blocks[0].clone();
        }
    }
    let zm = linalg::psd_project(&zm);
    let theta = recover_theta(&zm, &terms.omega, mu);
    Ok(BlockOutcome::Solved { theta, z: zm, fallback, prefer_private })
}

fn assemble(model: &SystemModel, thetas: &[Mat]) -> Result<Sanitization> {
    Sanitization::noise_only(model.agent_dims(), linalg::block_diag(thetas))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AltOptResult {
    pub sanitization: Sanitization,
    pub trace: AltOptTrace,
    pub utility: f64,
    pub privacy: Vec<f64>,
}

/// Sweeps agents `0..S`, each block minimizing the utility loss subject to
/// all privacy thresholds. Starts from maximal (capped) noise, `Θ̄ = 0`.
pub fn alternating_optimize(model: &SystemModel, eps: &PrivacyRequest, opts: &AltOptOptions) -> Result<AltOptResult> {
    eps.validate(model.agents())?;
    if opts.max_iters == 0 {
        return Err(Error::InvalidInput("max_iters must be at least 1".into()));
    }
    let factors = crlb::crlb_factors(model)?;
    for i in 0..model.agents() {
        let em = crlb::eps_max_from(model, &factors, i)?;
        if eps.eps[i] > 0.0 && eps.eps[i] >= em {
            return Err(Error::ThresholdAtOrAboveEpsMax { agent: i, eps: eps.eps[i], eps_max: em });
        }
    }
    let mu = mu_of(model, opts);
    let mut thetas: Vec<Mat> = model.agent_dims().iter().map(|&d| Mat::identity(d, d) / mu).collect();
    let mut trace = AltOptTrace::default();
    let mut last_u = crlb::utility(model, &assemble(model, &thetas)?)?;
    let mut current_u = last_u;
    for iteration in 1..=opts.max_iters {
        for i in 0..model.agents() {
            let terms = block_terms(model, &factors, i, &thetas)?;
            let status = match solve_agent_block(model, &terms, eps, &factors.p_x, opts)? {
                BlockOutcome::Solved { theta, fallback, prefer_private, .. } => {
                    let mut status = BlockStatus::SolverFailedKept;
                    let mut best: Option<(Vec<Mat>, TradeoffReport)> = None;
                    for theta in core::iter::once(theta).chain(fallback) {
                        // the solve meets the thresholds only to its own accuracy;
                        // privacy is monotone in Θ, so a slightly louder copy
                        // repairs a marginal shortfall
                        let mut found = None;
                        for scale in INFLATION {
                            let mut candidate = thetas.clone();
                            candidate[i] = linalg::sym_map(&(&theta * scale), |l| l.clamp(0.0, 1.0 / mu));
                            let r = crlb::tradeoff_report(model, &assemble(model, &candidate)?)?;
                            if (0..model.agents()).all(|j| r.privacy[j] >= eps.eps[j] - 1e-6) {
                                found = Some((candidate, r));
                                break;
                            }
                        }
                        let Some((candidate, r)) = found else { continue };
                        if r.utility < current_u - 1e-9 * (1.0 + current_u.abs()) {
                            status = BlockStatus::NoImprovementKept;
                            continue;
                        }
                        let total = |r: &TradeoffReport| r.privacy.iter().sum::<f64>();
                        if best.as_ref().is_none_or(|(_, b)| prefer_private && total(&r) > total(b)) {
                            best = Some((candidate, r));
                        }
                        if !prefer_private {
                            break;
                        }
                    }
                    if let Some((candidate, r)) = best {
                        thetas = candidate;
                        current_u = r.utility;
                        status = BlockStatus::Accepted;
                    }
                    status
                }
                BlockOutcome::Infeasible => BlockStatus::InfeasibleKept,
                BlockOutcome::SolverFailed(_) => BlockStatus::SolverFailedKept,
            };
            if iteration == 1 && status == BlockStatus::InfeasibleKept {
                return Err(Error::InfeasibleThresholds(format!("agent {i}'s block problem is infeasible even with every other agent at maximal noise")));
            }
            let r = crlb::tradeoff_report(model, &assemble(model, &thetas)?)?;
            trace.records.push(TraceRecord { iteration, agent: i, utility: r.utility, privacy: r.privacy, status });
        }
        trace.sweeps = iteration;
        let u = trace.records.last().map(|r| r.utility).unwrap_or(last_u);
        // a sweep in which some block kept its old noise is not a full step
        let complete = trace.records.iter().rev().take(model.agents()).all(|r| r.status == BlockStatus::Accepted);
        if (u - last_u).abs() < opts.utility_tol && iteration > 1 && complete {
            trace.converged = true;
            break;
        }
        last_u = u;
    }
    let sanitization = assemble(model, &thetas)?;
    let r = crlb::tradeoff_report(model, &sanitization)?;
    for j in 0..model.agents() {
        if r.privacy[j] < eps.eps[j] - 1e-4 {
            return Err(Error::InfeasibleThresholds(format!("agent {j} ends with privacy {} < {}", r.privacy[j], eps.eps[j])));
        }
    }
    Ok(AltOptResult { sanitization, trace, utility: r.utility, privacy: r.privacy })
}
