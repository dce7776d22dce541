use alloc::string::String;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("dimension mismatch in `{field}`: {detail}")]
    DimensionMismatch { field: String, detail: String },
    #[error("invariant violated: {0}")]
    InvariantViolation(String),
    #[error("singular model: {0}")]
    SingularModel(String),
    #[error("degenerate sanitization: {0}")]
    DegenerateSanitization(String),
    #[error("public map U has zero baseline variance")]
    DegeneratePublicMap,
    #[error("operation requires the {expected} case")]
    WrongCase { expected: &'static str },
    #[error("agent index {index} out of range (S = {agents})")]
    AgentIndex { index: usize, agents: usize },
    #[error("conditions not met: {0}")]
    ConditionsNotMet(String),
    #[error("privacy threshold for agent {agent} not reached with lambda <= {cap}")]
    LambdaCapExceeded { agent: usize, cap: f64 },
    #[error("threshold-at-or-above-eps-max: agent {agent} asks {eps} >= eps_max {eps_max}")]
    ThresholdAtOrAboveEpsMax { agent: usize, eps: f64, eps_max: f64 },
    #[error("unsupported case: {0}")]
    Unsupported(String),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("infeasible thresholds: {0}")]
    InfeasibleThresholds(String),
}
