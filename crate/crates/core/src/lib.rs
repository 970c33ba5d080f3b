//! Funnel model predictive control for relative-degree-two SISO systems.
//!
//! The stage cost puts a barrier on the tracking error `e` and on its
//! derivative `e'`, each inside its own time-varying funnel. Paired with a
//! hard input bound, this keeps both signals inside their funnels along the
//! closed loop without terminal constraints.
//!
//! Module map:
//! - [`funnel`]: boundary functions and funnel membership
//! - [`plant`]: control-affine plants, the mass-on-car benchmark, references
//! - [`sim`]: fixed-step RK4 and adaptive Dormand-Prince integration
//! - [`cost`]: stage costs and running cost
//! - [`ocp`]: single-shooting OCP solver and admissibility check
//! - [`mpc`]: the receding-horizon loop and feasibility audit
//! - [`experiment`]: config files, CSV output and the benchmark driver

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cost;
pub mod error;
pub mod experiment;
pub mod funnel;
pub mod mpc;
pub mod ocp;
pub mod plant;
pub mod sim;

pub use cost::{running_cost, stage_cost, RunningCost, Scheme, StageCost, StageCostSpec};
pub use error::*;
pub use experiment::{
    audit_run_dir, emit_csv, load_config, parse_config, render_csv, run_experiment, run_scheme, ExperimentConfig,
    ExperimentSummary, SchemeSummary, CSV_HEADER, PAPER_SEC5_JSON,
};
pub use funnel::{BoundaryFunction, FunnelPair, Membership, TimeGrid};
pub use mpc::{audit_recursive_feasibility, check_initial_feasibility, run_fmpc, ClosedLoopRun, FmpcConfig};
pub use ocp::{admissible, shift_warm_start, solve_ocp, OcpProblem, OcpSolution, SolverOptions};
pub use plant::{MassOnCar, MassOnCarParams, PlantModel, ReferenceSignal};
pub use sim::{integrate_adaptive, integrate_fixed, AdaptiveOptions, ControlSequence, Trajectory};
