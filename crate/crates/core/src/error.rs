use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FunnelError {
    #[error("time must be non-negative, got {0}")]
    NegativeTime(f64),
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),
    #[error("funnel {funnel} is not bounded away from zero at t = {t}")]
    G0Violation { funnel: usize, t: f64 },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlantError {
    #[error("invalid plant parameters: {0}")]
    InvalidParams(String),
    #[error("mass matrix is singular (det = {0})")]
    SingularMassMatrix(f64),
    #[error("unknown plant {0:?}")]
    UnknownPlant(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("state diverged after t = {last_finite_t}")]
    Divergence { last_finite_t: f64 },
    #[error("step size underflow ({step:e}) at t = {t}")]
    StepUnderflow { t: f64, step: f64 },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OcpError {
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("every cost evaluation diverged")]
    AllEvaluationsDiverged,
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Cost(#[from] CostError),
}

#[derive(Debug, Error)]
pub enum MpcError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("initial state is outside funnel {0}")]
    InitiallyInfeasible(usize),
    #[error("funnel pair rejected: {0}")]
    Funnel(#[from] FunnelError),
    #[error("derivative funnel condition violated at t = {0}")]
    G1Violation(f64),
    #[error("run aborted at t = {t_hat}: {source}")]
    Aborted {
        t_hat: f64,
        partial: Box<crate::mpc::ClosedLoopRun>,
        #[source]
        source: OcpOrSim,
    },
}

#[derive(Debug, Error)]
pub enum OcpOrSim {
    #[error(transparent)]
    Ocp(#[from] OcpError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("nothing to run")]
    NothingToRun,
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Mpc(#[from] MpcError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed run directory: {0}")]
    MalformedRun(String),
}
