//! Arbitrarily strong utility-privacy tradeoff (ASUP): perfect utility
//! together with privacy as close to its supremum as desired.
//!
//! Without a prior, agent `i` can hide `G_j x` at no utility cost iff some
//! direction `v` in `null(Φ_ii) ∩ null(UΨ_{:,i})` has `G_jΨ_{:,i} v ≠ 0`;
//! noise along `v` is then invisible to `u` and unboundedly harmful to `g_j`.
//! With a prior the condition is `UΨ_{:,i} H_i P0 Gᵀ = 0` for every agent.

use alloc::format;
use alloc::vec::Vec;

use crate::crlb::{self, CrlbFactors, PriorCase};
use crate::linalg::{self, Mat, Tolerance, Vector};
use crate::model::{PrivacyRequest, SystemModel};
use crate::sanitize::Sanitization;
use crate::{Error, Result};

/// Minimum relative residual threshold for the prior-case condition.
const RESIDUAL_REL_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AgentCheck {
    pub agent: usize,
    pub n_i: usize,
    /// `rank(Ξ_i)`, no-prior case.
    pub xi_rank: Option<usize>,
    /// `‖UΨ_{:,i} H_i P0 Gᵀ‖_F` and the threshold it was compared to, prior case.
    pub residual: Option<f64>,
    pub residual_tol: Option<f64>,
}

/// Agents able to hide private map `j` (no-prior case).
#[derive(Debug, Clone, PartialEq)]
pub struct PrivateCheck {
    pub private: usize,
    pub witnesses: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AsupVerdict {
    pub achievable: bool,
    pub case: PriorCase,
    pub agents: Vec<AgentCheck>,
    /// One entry per non-zero `G_j`; empty in the prior case.
    pub private: Vec<PrivateCheck>,
}

impl AsupVerdict {
    pub fn witnesses_for(&self, j: usize) -> Option<&[usize]> {
        self.private.iter().find(|p| p.private == j).map(|p| p.witnesses.as_slice())
    }
}

/// `Ξ_i = [U Ψ_{:,𝒮_i}; Φ_{𝒮_i,𝒮_i}]`.
pub fn xi_matrix(model: &SystemModel, factors: &CrlbFactors, i: usize) -> Result<Mat> {
    if factors.prior_case != PriorCase::NoPrior {
        return Err(Error::WrongCase { expected: "no-prior" });
    }
    let s = model.agent_slice(i)?;
    let u_psi = model.u() * factors.psi.columns(s.start, s.len);
    let phi = factors.phi.view((s.start, s.start), (s.len, s.len));
    let mut xi = Mat::zeros(u_psi.nrows() + s.len, s.len);
    xi.rows_mut(0, u_psi.nrows()).copy_from(&u_psi);
    xi.rows_mut(u_psi.nrows(), s.len).copy_from(&phi);
    Ok(xi)
}

/// Null space of `Ξ_i` with the blocks scaled by `‖U‖‖Ψ‖` and `‖R⁻¹‖`
/// (which bounds `‖Φ‖`), so the rank decision does not depend on the units
/// of `R`.
fn xi_null(model: &SystemModel, factors: &CrlbFactors, i: usize, tol: &Tolerance) -> Result<(usize, Mat)> {
    let xi = xi_matrix(model, factors, i)?;
    let ud = model.u().nrows();
    let n_i = xi.ncols();
    let mut scaled = xi;
    let u_scale = linalg::spectral_norm(model.u()) * linalg::spectral_norm(&factors.psi);
    let phi_scale = 1.0 / linalg::sym_eigen(model.r()).0[0];
    if u_scale > 0.0 {
        scaled.rows_mut(0, ud).scale_mut(1.0 / u_scale);
    }
    if phi_scale > 0.0 {
        scaled.rows_mut(ud, n_i).scale_mut(1.0 / phi_scale);
    }
    // both blocks are now of unit scale, so a block of pure round-off
    // (an agent whose rows the public map cannot see) counts as zero
    let (rank, null) = linalg::null_basis_scaled(&scaled, tol, 1.0)?;
    Ok((rank, null.into_matrix()))
}

/// Best witness direction of agent `i` for private map `j`: the null-basis
/// column of `Ξ_i` maximizing `‖G_jΨ_{:,i} v‖`, if it clears the tolerance.
fn witness_direction(model: &SystemModel, factors: &CrlbFactors, null: &Mat, i: usize, j: usize, tol: &Tolerance) -> Result<Option<Vector>> {
    if null.ncols() == 0 || model.g_is_zero(j) {
        return Ok(None);
    }
    let s = model.agent_slice(i)?;
    let g_psi = &model.g()[j] * factors.psi.columns(s.start, s.len);
    let scale = linalg::spectral_norm(&(&model.g()[j] * &factors.psi));
    let gains = &g_psi * null;
    let mut best: Option<(usize, f64)> = None;
    for k in 0..null.ncols() {
        let g = gains.column(k).norm();
        if best.is_none_or(|(_, b)| g > b) {
            best = Some((k, g));
        }
    }
    Ok(match best {
        Some((k, g)) if g > tol.rel_rank_tol * scale && g > 0.0 => Some(null.column(k).into_owned()),
        _ => None,
    })
}

/// Decides ASUP without a prior; records every witness agent per private map.
pub fn check_asup_no_prior(model: &SystemModel, tol: &Tolerance) -> Result<AsupVerdict> {
    if model.has_prior() {
        return Err(Error::WrongCase { expected: "no-prior" });
    }
    let factors = crlb::crlb_factors(model)?;
    let mut agents = Vec::new();
    let mut nulls = Vec::new();
    for i in 0..model.agents() {
        let (rank, null) = xi_null(model, &factors, i, tol)?;
        agents.push(AgentCheck { agent: i, n_i: model.agent_dims()[i], xi_rank: Some(rank), residual: None, residual_tol: None });
        nulls.push(null);
    }
    let mut private = Vec::new();
    for j in 0..model.agents() {
        if model.g_is_zero(j) {
            continue;
        }
        let mut witnesses = Vec::new();
        for (i, null) in nulls.iter().enumerate() {
            if witness_direction(model, &factors, null, i, j, tol)?.is_some() {
                witnesses.push(i);
            }
        }
        private.push(PrivateCheck { private: j, witnesses });
    }
    let achievable = private.iter().all(|p| !p.witnesses.is_empty());
    Ok(AsupVerdict { achievable, case: PriorCase::NoPrior, agents, private })
}

/// Decides ASUP with a prior: `‖UΨ_{:,i} H_i P0 Gᵀ‖_F ≤ tol·‖U‖‖Ψ‖‖H_i‖‖P0‖‖G‖`
/// for every agent, with `tol = max(1e-8, rel_rank_tol)`.
pub fn check_asup_with_prior(model: &SystemModel, tol: &Tolerance) -> Result<AsupVerdict> {
    let factors = crlb::crlb_factors(model)?;
    let p0 = factors.p0.as_ref().ok_or(Error::WrongCase { expected: "with-prior" })?;
    let g = model.g_stacked();
    let rel = RESIDUAL_REL_TOL.max(tol.rel_rank_tol);
    let mut agents = Vec::new();
    for i in 0..model.agents() {
        let s = model.agent_slice(i)?;
        let h_i = model.h_block(i)?;
        let psi_i = factors.psi.columns(s.start, s.len);
        let residual = (model.u() * psi_i * &h_i * p0 * g.transpose()).norm();
        let scale = model.u().norm() * factors.psi.norm() * h_i.norm() * p0.norm() * g.norm();
        agents.push(AgentCheck { agent: i, n_i: s.len, xi_rank: None, residual: Some(residual), residual_tol: Some(rel * scale) });
    }
    let achievable = agents.iter().all(|a| a.residual <= a.residual_tol);
    Ok(AsupVerdict { achievable, case: PriorCase::WithPrior, agents, private: Vec::new() })
}

/// Dispatches on the presence of a prior.
pub fn check_asup(model: &SystemModel, tol: &Tolerance) -> Result<AsupVerdict> {
    if model.has_prior() {
        check_asup_with_prior(model, tol)
    } else {
        check_asup_no_prior(model, tol)
    }
}

/// Which agent may hide private map `j` in the no-prior construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WitnessPolicy {
    /// Agent `j` hides its own map (the per-agent algorithm's precondition).
    #[default]
    OwnAgent,
    /// Any witnessing agent may (lowest index first).
    AnyAgent,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstructOptions {
    pub lambda_cap: f64,
    pub policy: WitnessPolicy,
    pub tol: Tolerance,
}

impl Default for ConstructOptions {
    fn default() -> Self {
        Self { lambda_cap: 1e12, policy: WitnessPolicy::OwnAgent, tol: Tolerance::default() }
    }
}

/// One noise component: `λ v vᵀ` at `agent` (no prior), or `λ W Wᵀ` with
/// `W` of dimension `rank` (prior).
#[derive(Debug, Clone, PartialEq)]
pub struct ConstructionStep {
    pub private: Option<usize>,
    pub agent: usize,
    pub lambda: f64,
    pub direction: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AsupConstruction {
    pub sanitization: Sanitization,
    pub steps: Vec<ConstructionStep>,
}

/// Smallest `λ` (within 1%) with `ok(λ)`, searching by doubling/halving
/// from 1 and then bisecting. `None` once `λ` would exceed `cap`.
fn smallest_lambda(mut ok: impl FnMut(f64) -> Result<bool>, cap: f64) -> Result<Option<f64>> {
    let (mut lo, mut hi);
    if ok(1.0)? {
        hi = 1.0;
        lo = 0.5;
        while ok(lo)? {
            hi = lo;
            lo *= 0.5;
            if lo < 1e-300 {
                return Ok(Some(hi));
            }
        }
    } else {
        lo = 1.0;
        hi = 2.0;
        loop {
            if hi > cap {
                return Ok(None);
            }
            if ok(hi)? {
                break;
            }
            lo = hi;
            hi *= 2.0;
        }
    }
    for _ in 0..20 {
        if hi <= 1.01 * lo {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if ok(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(Some(hi))
}

fn embed(model: &SystemModel, agent: usize, block: &Mat) -> Result<Mat> {
    let s = model.agent_slice(agent)?;
    let mut out = Mat::zeros(model.n(), model.n());
    out.view_mut((s.start, s.start), (s.len, s.len)).copy_from(block);
    Ok(out)
}

/// Rank-one perfect-utility noise per private map, summed over maps.
///
/// For each `j` with `ε_j > 0`, a witness agent `i` (per `policy`) adds
/// `λ_j v vᵀ`, `λ_j` the smallest value (within 1%) with `p_j ≥ ε_j` for that
/// component alone. By monotonicity the sum meets every threshold; it is
/// re-verified.
pub fn construct_no_prior(model: &SystemModel, eps: &PrivacyRequest, opts: &ConstructOptions) -> Result<AsupConstruction> {
    if model.has_prior() {
        return Err(Error::WrongCase { expected: "no-prior" });
    }
    eps.validate(model.agents())?;
    let tol = &opts.tol;
    let factors = crlb::crlb_factors(model)?;
    let p_x = &factors.p_x;
    let dims = model.agent_dims();
    let nulls = (0..model.agents()).map(|i| xi_null(model, &factors, i, tol).map(|x| x.1)).collect::<Result<Vec<_>>>()?;
    let mut theta = Mat::zeros(model.n(), model.n());
    let mut steps = Vec::new();
    for j in 0..model.agents() {
        let e = eps.eps[j];
        if e == 0.0 {
            continue;
        }
        if model.g_is_zero(j) {
            return Err(Error::ConditionsNotMet(format!("agent {j} asks for privacy {e} but G_{j} = 0")));
        }
        let candidates: Vec<usize> = match opts.policy {
            WitnessPolicy::OwnAgent => alloc::vec![j],
            WitnessPolicy::AnyAgent => (0..model.agents()).collect(),
        };
        let mut found = None;
        for i in candidates {
            if let Some(v) = witness_direction(model, &factors, &nulls[i], i, j, tol)? {
                found = Some((i, v));
                break;
            }
        }
        let (i, v) = found.ok_or_else(|| Error::ConditionsNotMet(format!("no agent can hide private map {j} at perfect utility")))?;
        let vvt = &v * v.transpose();
        let component = |lam: f64| embed(model, i, &(&vvt * lam));
        let lambda = smallest_lambda(
            |lam| {
                let s = Sanitization::noise_only(dims, component(lam)?)?;
                Ok(crlb::privacy_from(model, p_x, &crlb::perturbed_crlb(model, &s)?, j)? >= e)
            },
            opts.lambda_cap,
        )?
        .ok_or(Error::LambdaCapExceeded { agent: j, cap: opts.lambda_cap })?;
        theta += component(lambda)?;
        steps.push(ConstructionStep { private: Some(j), agent: i, lambda, direction: Mat::from_column_slice(v.len(), 1, v.as_slice()) });
    }
    let sanitization = Sanitization::noise_only(dims, linalg::symmetrize(&theta))?;
    verify(model, &sanitization, eps)?;
    Ok(AsupConstruction { sanitization, steps })
}

/// Noise on the row space of `Ξ_i = G P0 H_iᵀ` for every agent, scaled by a
/// common `λ` (smallest within 1%) until every `p_i ≥ ε_i` holds when
/// evaluated directly.
pub fn construct_with_prior(model: &SystemModel, eps: &PrivacyRequest, opts: &ConstructOptions) -> Result<AsupConstruction> {
    let verdict = check_asup_with_prior(model, &opts.tol)?;
    eps.validate(model.agents())?;
    let factors = crlb::crlb_factors(model)?;
    for i in 0..model.agents() {
        let em = crlb::eps_max_from(model, &factors, i)?;
        // a threshold within round-off of the supremum is unreachable too
        if eps.eps[i] > 0.0 && eps.eps[i] >= em * (1.0 - 1e-12) {
            return Err(Error::ThresholdAtOrAboveEpsMax { agent: i, eps: eps.eps[i], eps_max: em });
        }
    }
    if !verdict.achievable {
        return Err(Error::ConditionsNotMet("UΨ_{:,i} H_i P0 Gᵀ ≠ 0 for some agent".into()));
    }
    let dims = model.agent_dims();
    let p0 = factors.p0.as_ref().expect("prior case");
    let g = model.g_stacked();
    let mut bases = Vec::new();
    let mut shape = Mat::zeros(model.n(), model.n());
    for i in 0..model.agents() {
        let h_i = model.h_block(i)?;
        let xi = &g * p0 * h_i.transpose();
        // an all-round-off Ξ_i must give an empty basis, not a spurious one
        let scale = linalg::spectral_norm(&g) * linalg::spectral_norm(p0) * linalg::spectral_norm(&h_i);
        let smax = linalg::spectral_norm(&xi);
        let cut = RESIDUAL_REL_TOL.max(opts.tol.rel_rank_tol) * scale;
        let w = if smax <= cut {
            Mat::zeros(xi.ncols(), 0)
        } else {
            linalg::row_basis(&xi, &opts.tol.with_rank_tol(opts.tol.rel_rank_tol.max(cut / smax)))?.into_matrix()
        };
        shape += embed(model, i, &(&w * w.transpose()))?;
        bases.push(w);
    }
    let shape = linalg::symmetrize(&shape);
    let lambda = if eps.eps.iter().all(|&e| e == 0.0) {
        0.0
    } else {
        let p_x = &factors.p_x;
        smallest_lambda(
            |lam| {
                let s = Sanitization::noise_only(dims, &shape * lam)?;
                let pt = crlb::perturbed_crlb(model, &s)?;
                for i in 0..model.agents() {
                    if crlb::privacy_from(model, p_x, &pt, i)? < eps.eps[i] {
                        return Ok(false);
                    }
                }
                Ok(true)
            },
            opts.lambda_cap,
        )?
        .ok_or(Error::LambdaCapExceeded { agent: 0, cap: opts.lambda_cap })?
    };
    let sanitization = Sanitization::noise_only(dims, &shape * lambda)?;
    verify(model, &sanitization, eps)?;
    let steps = bases.into_iter().enumerate().map(|(i, w)| ConstructionStep { private: None, agent: i, lambda, direction: w }).collect();
    Ok(AsupConstruction { sanitization, steps })
}

fn verify(model: &SystemModel, s: &Sanitization, eps: &PrivacyRequest) -> Result<()> {
    let p_x = crlb::baseline_crlb(model)?;
    let pt = crlb::perturbed_crlb(model, s)?;
    for i in 0..model.agents() {
        let p = crlb::privacy_from(model, &p_x, &pt, i)?;
        if p < eps.eps[i] {
            return Err(Error::InvariantViolation(format!("constructed privacy {p} below threshold {} for agent {i}", eps.eps[i])));
        }
    }
    Ok(())
}
