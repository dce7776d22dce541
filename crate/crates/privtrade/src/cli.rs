//! Command-line surface. [`run`] is a pure function of the arguments and the
//! files they name, so it is tested directly.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use privtrade_core::altopt::{self, AltOptOptions};
use privtrade_core::asup::{self, ConstructOptions, WitnessPolicy};
use privtrade_core::crlb;
use privtrade_core::sdp::{self, MaxPrivacyOptions, SdpOptions};
use privtrade_core::{Error, PrivacyRequest, SystemModel, Tolerance};
use serde_json::{json, Value};

use crate::experiments::{self, ExperimentError, ExperimentSpec};
use crate::io::{self, IoError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_MODEL: i32 = 2;
pub const EXIT_INFEASIBLE: i32 = 3;
pub const EXIT_SOLVER: i32 = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommandResult {
    pub exit_code: i32,
    /// JSON or CSV on success.
    pub stdout: String,
    /// Diagnostic on failure.
    pub stderr: String,
}

#[derive(Debug, Parser)]
#[command(name = "privtrade", version, about = "Utility-privacy tradeoff design for decentralized linear estimation")]
struct Cli {
    /// Relative singular-value cutoff for rank decisions.
    #[arg(long, global = true, default_value_t = 1e-9)]
    tol: f64,
    /// Interior-point stopping tolerance.
    #[arg(long, global = true, default_value_t = 1e-8)]
    sdp_tol: f64,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Spaces per JSON indent level; 0 prints compactly.
    #[arg(long, global = true, default_value_t = 2)]
    json_indent: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Decide whether arbitrarily strong utility-privacy tradeoff is achievable.
    CheckAsup { model: PathBuf },
    /// Build perfect-utility noise meeting the privacy thresholds.
    Construct {
        model: PathBuf,
        #[command(flatten)]
        eps: EpsArg,
        #[arg(long, default_value_t = 1e12)]
        lambda_cap: f64,
        /// Which agents may hide a private map: `own` or `any`.
        #[arg(long, default_value = "own")]
        policy: String,
    },
    /// Maximum privacy under perfect utility with per-agent power budgets.
    MaxPrivacy {
        model: PathBuf,
        #[arg(long, value_delimiter = ',', required_unless_present = "delta_unbounded", conflicts_with = "delta_unbounded")]
        delta: Vec<f64>,
        /// No power constraint (budgets of 1e6 per agent).
        #[arg(long)]
        delta_unbounded: bool,
        /// Maximize the sum of privacies rather than of raw bound traces.
        #[arg(long)]
        normalized: bool,
        /// Restrict the noise to diagonal matrices.
        #[arg(long)]
        diagonal: bool,
        /// Write the SDP in text form to this file.
        #[arg(long)]
        dump_problem: Option<PathBuf>,
    },
    /// Alternating per-agent optimization of the tradeoff.
    Altopt {
        model: PathBuf,
        #[command(flatten)]
        eps: EpsArg,
        #[arg(long, default_value_t = 30)]
        max_iters: usize,
        /// Write the per-block trace as CSV to this file.
        #[arg(long)]
        trace_out: Option<PathBuf>,
    },
    /// Regenerate a figure's table from seeded random models.
    Simulate {
        #[arg(long)]
        figure: u8,
        #[arg(long)]
        trials: Option<usize>,
        /// N = 72, L = 12, 100 trials instead of the desk-scale defaults.
        #[arg(long)]
        paper_scale: bool,
    },
}

#[derive(Debug, Args)]
struct EpsArg {
    /// Privacy thresholds, one per agent (a single value applies to all).
    #[arg(long, value_delimiter = ',', required = true)]
    eps: Vec<f64>,
}

enum Failure {
    Usage(String),
    Model(String),
    Infeasible(String),
    Solver(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::ConditionsNotMet(_) | Error::LambdaCapExceeded { .. } | Error::ThresholdAtOrAboveEpsMax { .. } | Error::InfeasibleThresholds(_) => Failure::Infeasible(msg),
            Error::Solver(_) => Failure::Solver(msg),
            _ => Failure::Model(msg),
        }
    }
}

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        match e {
            IoError::Model(inner) => inner.into(),
            other => Failure::Model(other.to_string()),
        }
    }
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::TooManyFailures { .. } => Failure::Solver(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

fn write_file(path: &PathBuf, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::Usage(format!("cannot write {}: {e}", path.display())))
}

fn request(model: &SystemModel, eps: &[f64]) -> Result<PrivacyRequest, Failure> {
    let eps = match eps {
        [e] => vec![*e; model.agents()],
        _ => eps.to_vec(),
    };
    let req = PrivacyRequest::new(eps);
    req.validate(model.agents())?;
    Ok(req)
}

fn tolerance(cli: &Cli) -> Result<Tolerance, Failure> {
    let t = Tolerance::default().with_rank_tol(cli.tol);
    t.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(t)
}

fn execute(cli: &Cli) -> Result<String, Failure> {
    let sdp_opts = SdpOptions { tol: cli.sdp_tol, ..Default::default() };
    let json = |v: Value| io::render(&v, cli.json_indent);
    match &cli.command {
        Command::CheckAsup { model } => {
            let m = io::load_model(model)?;
            Ok(json(io::verdict_json(&asup::check_asup(&m, &tolerance(cli)?)?)))
        }
        Command::Construct { model, eps, lambda_cap, policy } => {
            let m = io::load_model(model)?;
            let req = request(&m, &eps.eps)?;
            let policy = match policy.as_str() {
                "own" => WitnessPolicy::OwnAgent,
                "any" => WitnessPolicy::AnyAgent,
                p => return Err(Failure::Usage(format!("unknown policy `{p}` (expected own or any)"))),
            };
            let opts = ConstructOptions { lambda_cap: *lambda_cap, policy, tol: tolerance(cli)? };
            let c = if m.has_prior() { asup::construct_with_prior(&m, &req, &opts)? } else { asup::construct_no_prior(&m, &req, &opts)? };
            let report = crlb::tradeoff_report(&m, &c.sanitization)?;
            Ok(json(io::construction_json(&c, &report)))
        }
        Command::MaxPrivacy { model, delta, delta_unbounded, normalized, diagonal, dump_problem } => {
            let m = io::load_model(model)?;
            let delta = if *delta_unbounded {
                vec![experiments::UNBOUNDED_BUDGET; m.agents()]
            } else if delta.len() == 1 {
                vec![delta[0]; m.agents()]
            } else {
                delta.clone()
            };
            let opts = MaxPrivacyOptions { normalized: *normalized, diagonal: *diagonal, sdp: sdp_opts, tol: tolerance(cli)? };
            if let Some(path) = dump_problem {
                write_file(path, &sdp::max_privacy_problem(&m, &delta, &opts)?.dump())?;
            }
            let r = sdp::max_privacy(&m, &delta, &opts)?;
            let report = crlb::tradeoff_report(&m, &r.sanitization)?;
            let k = r.solution.kkt_residuals;
            Ok(json(json!({
                "sanitization": io::sanitization_json(&r.sanitization),
                "report": io::report_json(&report),
                "objective": r.objective,
                "Z": io::to_rows(&r.z),
                "solver": {
                    "status": format!("{:?}", r.solution.status),
                    "iterations": r.solution.iterations,
                    "kkt": {"primal": k.primal, "dual": k.dual, "gap": k.gap},
                },
            })))
        }
        Command::Altopt { model, eps, max_iters, trace_out } => {
            let m = io::load_model(model)?;
            let req = request(&m, &eps.eps)?;
            let opts = AltOptOptions { max_iters: *max_iters, sdp: sdp_opts, ..Default::default() };
            let r = altopt::alternating_optimize(&m, &req, &opts)?;
            if let Some(path) = trace_out {
                write_file(path, &r.trace.to_csv(m.agents()))?;
            }
            let report = crlb::tradeoff_report(&m, &r.sanitization)?;
            Ok(json(json!({
                "sanitization": io::sanitization_json(&r.sanitization),
                "report": io::report_json(&report),
                "trace": io::trace_json(&r.trace),
            })))
        }
        Command::Simulate { figure, trials, paper_scale } => {
            let mut spec = if *paper_scale { ExperimentSpec::paper(cli.seed) } else { ExperimentSpec::desk(cli.seed) };
            if let Some(t) = trials {
                spec.trials = *t;
            }
            Ok(experiments::run_figure(*figure, &spec)?.to_csv())
        }
    }
}

/// Parses `args` (including the program name) and runs one command.
pub fn run<I, T>(args: I) -> CommandResult
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => CommandResult { exit_code: EXIT_OK, stdout: text, stderr: String::new() },
                _ => CommandResult { exit_code: EXIT_USAGE, stdout: String::new(), stderr: text },
            };
        }
    };
    match execute(&cli) {
        Ok(stdout) => CommandResult { exit_code: EXIT_OK, stdout, stderr: String::new() },
        Err(f) => {
            let (exit_code, msg) = match f {
                Failure::Usage(m) => (EXIT_USAGE, m),
                Failure::Model(m) => (EXIT_MODEL, m),
                Failure::Infeasible(m) => (EXIT_INFEASIBLE, m),
                Failure::Solver(m) => (EXIT_SOLVER, m),
            };
            CommandResult { exit_code, stdout: String::new(), stderr: format!("error: {msg}\n") }
        }
    }
}
