//! Seeded random-model studies: maximum privacy under perfect utility
//! (figures 1–2), the alternating-optimization tradeoff (figure 3) and its
//! convergence (figure 4).
//!
//! Every trial draws from its own ChaCha20 stream (`seed_from_u64(seed)`,
//! stream = trial index) in a fixed order — `A` for `R = AAᵀ` (N×N), `H`
//! (N×L), `G` (3×L), `A` for `P0 = AAᵀ` (L×L), then `U` — all row-major
//! through `rand`'s uniform `f64` sampler. `P0` is always drawn so that the
//! prior setting never shifts the other draws, and `U` comes last so that
//! its size changes nothing else.

use privtrade_core::altopt::{self, AltOptOptions};
use privtrade_core::asup;
use privtrade_core::crlb;
use privtrade_core::linalg;
use privtrade_core::sdp::{self, MaxPrivacyOptions};
use privtrade_core::{Mat, PrivacyRequest, SystemModel, Tolerance};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

/// Per-agent budget standing in for "no power constraint".
pub const UNBOUNDED_BUDGET: f64 = 1e6;
/// A grid point fails when more than this fraction of its trials fail.
pub const MAX_FAILURE_FRACTION: f64 = 0.1;
const G_ROWS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorKind {
    None,
    RandomPd,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub n: usize,
    pub l: usize,
    /// Agent counts for figures 1–2.
    pub s_values: Vec<usize>,
    pub u_dim_values: Vec<usize>,
    pub trials: usize,
    pub seed: u64,
    pub prior: PriorKind,
    pub privacy_cap: f64,
    /// Agent counts and thresholds of figure 3.
    pub tradeoff_s_values: Vec<usize>,
    pub eps_values: Vec<f64>,
    /// Public dimension used by figures 3–4.
    pub tradeoff_u_dim: usize,
    pub convergence_s: usize,
    pub convergence_eps: f64,
    pub max_iters: usize,
}

impl ExperimentSpec {
    /// Desk scale: `N = 24`, `L = 6`, 20 trials; same `N_i` as the paper's figure 3.
    pub fn desk(seed: u64) -> Self {
        Self {
            n: 24,
            l: 6,
            s_values: vec![1, 2, 3, 4, 6],
            u_dim_values: vec![1, 2, 3],
            trials: 20,
            seed,
            prior: PriorKind::None,
            privacy_cap: 100.0,
            tradeoff_s_values: vec![3, 4, 6],
            eps_values: vec![0.5, 1.0, 2.0, 5.0, 10.0, 20.0],
            tradeoff_u_dim: 2,
            convergence_s: 4,
            convergence_eps: 10.0,
            max_iters: 30,
        }
    }

    /// The published settings: `N = 72`, `L = 12`, 100 trials.
    pub fn paper(seed: u64) -> Self {
        Self {
            n: 72,
            l: 12,
            s_values: vec![1, 2, 3, 4, 6, 8, 9],
            u_dim_values: vec![1, 2, 3, 4],
            trials: 100,
            tradeoff_s_values: vec![9, 12, 18],
            convergence_s: 9,
            ..Self::desk(seed)
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.trials == 0 {
            return Err(ExperimentError::Spec("trials must be at least 1".into()));
        }
        if self.n == 0 || self.l == 0 || self.l > self.n {
            return Err(ExperimentError::Spec(format!("need 0 < L <= N, got N = {}, L = {}", self.n, self.l)));
        }
        for &s in self.s_values.iter().chain(&self.tradeoff_s_values).chain([&self.convergence_s]) {
            if s == 0 || self.n % s != 0 {
                return Err(ExperimentError::Spec(format!("N = {} is not divisible by S = {s}", self.n)));
            }
        }
        if self.u_dim_values.contains(&0) || self.tradeoff_u_dim == 0 {
            return Err(ExperimentError::Spec("public dimensions must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("invalid experiment: {0}")]
    Spec(String),
    #[error("figure must be 1, 2, 3 or 4, got {0}")]
    Figure(u8),
    #[error("{failed} of {trials} trials failed at {point}")]
    TooManyFailures { point: String, failed: usize, trials: usize },
}

fn uniform(rng: &mut ChaCha20Rng, rows: usize, cols: usize, half: f64) -> Mat {
    let mut m = Mat::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            m[(r, c)] = rng.random_range(-half..half);
        }
    }
    m
}

/// Deterministic model for `(spec.seed, trial)` with `s` equal agents
/// sharing the private map `G`.
pub fn gen_random_model(spec: &ExperimentSpec, trial: usize, s: usize, u_dim: usize, prior: PriorKind) -> SystemModel {
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    rng.set_stream(trial as u64);
    let (n, l) = (spec.n, spec.l);
    let tol = Tolerance::default();
    let r = loop {
        let a = uniform(&mut rng, n, n, 0.5);
        let r = linalg::symmetrize(&(&a * a.transpose()));
        if linalg::is_pd(&r, &tol).unwrap_or(false) {
            break r;
        }
        log::warn!("trial {trial}: singular R draw, resampling");
    };
    let h = uniform(&mut rng, n, l, 0.5);
    let g = uniform(&mut rng, G_ROWS, l, 0.5);
    let a0 = uniform(&mut rng, l, l, 10.0);
    let u = uniform(&mut rng, u_dim, l, 0.5);
    let j0 = match prior {
        PriorKind::None => None,
        PriorKind::RandomPd => Some(linalg::spd_inverse(&linalg::symmetrize(&(&a0 * a0.transpose())), "P0").expect("P0 = AAᵀ is PD almost surely")),
    };
    SystemModel::new(h, r, j0, u, vec![g; s], vec![n / s; s]).expect("generated model is valid almost surely")
}

/// One output row; `None` fields are written empty.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub figure: u8,
    pub s: Option<usize>,
    pub u_dim: Option<usize>,
    pub eps: Option<f64>,
    pub iteration: Option<Iteration>,
    pub value: f64,
    pub n_trials: usize,
    pub n_failed: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Iteration {
    Sweep(usize),
    /// Figure 3's maximum-privacy-under-perfect-utility point.
    Marker,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaxPrivacyTrial {
    pub s: usize,
    pub u_dim: usize,
    pub trial: usize,
    /// Agent 0's privacy (all agents share `G`), uncapped.
    pub privacy: f64,
    pub eps_max: f64,
    pub asup_achievable: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TradeoffTrial {
    pub s: usize,
    pub trial: usize,
    /// Maximum privacy under perfect utility, capped.
    pub eps_star: f64,
    /// Utility at each of `spec.eps_values`.
    pub utilities: Vec<f64>,
    pub utility_at_star: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceTrial {
    pub trial: usize,
    /// Utility after each sweep, padded with the last value to `max_iters`.
    pub utilities: Vec<f64>,
    pub converged_at: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FigureRun {
    pub rows: Vec<Row>,
    pub max_privacy: Vec<MaxPrivacyTrial>,
    pub tradeoff: Vec<TradeoffTrial>,
    pub convergence: Vec<ConvergenceTrial>,
}

pub const CSV_HEADER: [&str; 8] = ["figure", "S", "U_dim", "eps", "iteration", "value", "n_trials", "n_failed"];

impl FigureRun {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_HEADER).expect("in-memory write");
        let opt = |x: Option<String>| x.unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.figure.to_string(),
                opt(r.s.map(|v| v.to_string())),
                opt(r.u_dim.map(|v| v.to_string())),
                opt(r.eps.map(|v| v.to_string())),
                opt(r.iteration.map(|i| match i {
                    Iteration::Sweep(k) => k.to_string(),
                    Iteration::Marker => "marker".into(),
                })),
                r.value.to_string(),
                r.n_trials.to_string(),
                r.n_failed.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("CSV is UTF-8")
    }
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, k) = v.into_iter().fold((0.0, 0usize), |(s, k), x| (s + x, k + 1));
    if k == 0 {
        f64::NAN
    } else {
        s / k as f64
    }
}

/// Runs `f` over all trials in parallel, keeping trial order.
fn run_trials<T: Send>(spec: &ExperimentSpec, point: &str, f: impl Fn(usize) -> privtrade_core::Result<T> + Sync) -> Result<(Vec<T>, usize), ExperimentError> {
    let results: Vec<_> = (0..spec.trials).into_par_iter().map(|t| (t, f(t))).collect();
    let mut ok = Vec::new();
    let mut failed = 0;
    for (t, r) in results {
        match r {
            Ok(v) => ok.push(v),
            Err(e) => {
                log::warn!("{point}, trial {t}: {e}");
                failed += 1;
            }
        }
    }
    if failed as f64 > MAX_FAILURE_FRACTION * spec.trials as f64 {
        return Err(ExperimentError::TooManyFailures { point: point.into(), failed, trials: spec.trials });
    }
    Ok((ok, failed))
}

fn max_privacy_of(model: &SystemModel) -> privtrade_core::Result<f64> {
    let delta = vec![UNBOUNDED_BUDGET; model.agents()];
    Ok(sdp::max_privacy(model, &delta, &MaxPrivacyOptions::default())?.privacy[0])
}

fn max_privacy_figure(spec: &ExperimentSpec, figure: u8, prior: PriorKind) -> Result<FigureRun, ExperimentError> {
    let mut run = FigureRun::default();
    for &s in &spec.s_values {
        for &u_dim in &spec.u_dim_values {
            let (trials, failed) = run_trials(spec, &format!("figure {figure}, S = {s}, U_dim = {u_dim}"), |t| {
                let m = gen_random_model(spec, t, s, u_dim, prior);
                let verdict = asup::check_asup(&m, &Tolerance::default())?;
                Ok(MaxPrivacyTrial { s, u_dim, trial: t, privacy: max_privacy_of(&m)?, eps_max: crlb::eps_max(&m, 0)?, asup_achievable: verdict.achievable })
            })?;
            let value = mean(trials.iter().map(|t| if figure == 1 { t.privacy.min(spec.privacy_cap) } else { t.privacy }));
            // figure 2 reports the mean supremum ε₁^max alongside
            let eps = (figure == 2).then(|| mean(trials.iter().map(|t| t.eps_max)));
            run.rows.push(Row { figure, s: Some(s), u_dim: Some(u_dim), eps, iteration: None, value, n_trials: trials.len(), n_failed: failed });
            run.max_privacy.extend(trials);
        }
    }
    Ok(run)
}

fn altopt_utility(m: &SystemModel, eps: f64, spec: &ExperimentSpec) -> privtrade_core::Result<f64> {
    let opts = AltOptOptions { max_iters: spec.max_iters, ..Default::default() };
    Ok(altopt::alternating_optimize(m, &PrivacyRequest::uniform(m.agents(), eps), &opts)?.utility)
}

fn tradeoff_figure(spec: &ExperimentSpec) -> Result<FigureRun, ExperimentError> {
    let mut run = FigureRun::default();
    for &s in &spec.tradeoff_s_values {
        let (trials, failed) = run_trials(spec, &format!("figure 3, S = {s}"), |t| {
            let m = gen_random_model(spec, t, s, spec.tradeoff_u_dim, spec.prior);
            let eps_star = max_privacy_of(&m)?.clamp(0.0, spec.privacy_cap);
            let utilities = spec.eps_values.iter().map(|&e| altopt_utility(&m, e, spec)).collect::<Result<_, _>>()?;
            Ok(TradeoffTrial { s, trial: t, eps_star, utilities, utility_at_star: altopt_utility(&m, eps_star, spec)? })
        })?;
        for (k, &eps) in spec.eps_values.iter().enumerate() {
            let value = mean(trials.iter().map(|t| t.utilities[k]));
            run.rows.push(Row { figure: 3, s: Some(s), u_dim: Some(spec.tradeoff_u_dim), eps: Some(eps), iteration: None, value, n_trials: trials.len(), n_failed: failed });
        }
        run.rows.push(Row {
            figure: 3,
            s: Some(s),
            u_dim: Some(spec.tradeoff_u_dim),
            eps: Some(mean(trials.iter().map(|t| t.eps_star))),
            iteration: Some(Iteration::Marker),
            value: mean(trials.iter().map(|t| t.utility_at_star)),
            n_trials: trials.len(),
            n_failed: failed,
        });
        run.tradeoff.extend(trials);
    }
    Ok(run)
}

fn convergence_figure(spec: &ExperimentSpec) -> Result<FigureRun, ExperimentError> {
    let s = spec.convergence_s;
    let (trials, failed) = run_trials(spec, &format!("figure 4, S = {s}"), |t| {
        let m = gen_random_model(spec, t, s, spec.tradeoff_u_dim, spec.prior);
        let opts = AltOptOptions { max_iters: spec.max_iters, utility_tol: 0.0, ..Default::default() };
        let r = altopt::alternating_optimize(&m, &PrivacyRequest::uniform(s, spec.convergence_eps), &opts)?;
        let mut utilities = r.trace.sweep_utilities();
        let converged_at = utilities.windows(2).position(|w| (w[1] - w[0]).abs() < 1e-4).map(|k| k + 2);
        let last = *utilities.last().expect("at least one sweep");
        utilities.resize(spec.max_iters, last);
        Ok(ConvergenceTrial { trial: t, utilities, converged_at })
    })?;
    let mut run = FigureRun::default();
    for k in 0..spec.max_iters {
        let value = mean(trials.iter().map(|t| t.utilities[k]));
        run.rows.push(Row { figure: 4, s: Some(s), u_dim: Some(spec.tradeoff_u_dim), eps: Some(spec.convergence_eps), iteration: Some(Iteration::Sweep(k + 1)), value, n_trials: trials.len(), n_failed: failed });
    }
    run.convergence = trials;
    Ok(run)
}

/// Figure 1 forces the no-prior setting and caps values at
/// `spec.privacy_cap`; figure 2 forces a random prior.
pub fn run_figure(figure: u8, spec: &ExperimentSpec) -> Result<FigureRun, ExperimentError> {
    spec.validate()?;
    match figure {
        1 => max_privacy_figure(spec, 1, PriorKind::None),
        2 => max_privacy_figure(spec, 2, PriorKind::RandomPd),
        3 => tradeoff_figure(spec),
        4 => convergence_figure(spec),
        k => Err(ExperimentError::Figure(k)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let spec = ExperimentSpec::desk(11);
        let a = gen_random_model(&spec, 0, 3, 2, PriorKind::RandomPd);
        let b = gen_random_model(&spec, 0, 3, 2, PriorKind::RandomPd);
        assert_eq!(a, b);
        let c = gen_random_model(&spec, 1, 3, 2, PriorKind::RandomPd);
        assert_ne!(a.h(), c.h());
        // the prior and the public dimension leave the other draws alone
        let d = gen_random_model(&spec, 0, 3, 1, PriorKind::None);
        assert_eq!((a.h(), a.r(), &a.g()[0]), (d.h(), d.r(), &d.g()[0]));
        assert!(linalg::is_pd(a.r(), &Tolerance::default()).unwrap());
    }

    #[test]
    fn paper_agent_split() {
        let spec = ExperimentSpec::paper(0);
        let m = gen_random_model(&spec, 0, 9, 1, PriorKind::None);
        assert_eq!(m.agent_dims(), &[8; 9]);
    }

    #[test]
    fn validation() {
        let mut spec = ExperimentSpec::desk(0);
        spec.s_values.push(5);
        assert!(spec.validate().is_err());
        let mut spec = ExperimentSpec::desk(0);
        spec.trials = 0;
        assert!(spec.validate().is_err());
        assert!(matches!(run_figure(5, &ExperimentSpec::desk(0)), Err(ExperimentError::Figure(5))));
    }

    #[test]
    fn small_run_is_reproducible() {
        let spec = ExperimentSpec { trials: 2, s_values: vec![1, 2], u_dim_values: vec![1], ..ExperimentSpec::desk(3) };
        let a = run_figure(1, &spec).unwrap().to_csv();
        assert_eq!(a, run_figure(1, &spec).unwrap().to_csv());
        assert!(a.starts_with("figure,S,U_dim,eps,iteration,value,n_trials,n_failed\n1,1,1,,,"));
        assert_eq!(a.lines().count(), 3);
    }
}
