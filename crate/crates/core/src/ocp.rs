//! Finite-horizon optimal control problem, solved by direct single shooting
//! over piecewise-constant inputs with `|u| <= M`.
//!
//! The decision vector is the list of input levels. Its cost is the running
//! cost of the RK4 prediction. The solver is projected gradient descent with
//! forward-difference gradients and an Armijo backtracking line search along
//! the projection arc.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::{running_cost, RunningCost, StageCostSpec};
use crate::error::{OcpError, SimError};
use crate::funnel::Membership;
use crate::plant::PlantModel;
use crate::sim::{integrate_adaptive, integrate_fixed, AdaptiveOptions, ControlSequence, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub max_iterations: usize,
    /// Stop when the projected gradient's max-norm falls below this.
    pub grad_tol: f64,
    /// Stop when an iteration decreases the cost by less than this.
    pub cost_tol: f64,
    /// Finite-difference perturbation, relative to `max(1, M)`.
    pub fd_step: f64,
    /// Sufficient-decrease parameter of the Armijo test.
    pub armijo: f64,
    /// Step shrink factor while backtracking.
    pub shrink: f64,
    pub max_backtracks: usize,
    /// RK4 steps per control interval in the prediction.
    pub substeps: usize,
    /// Evaluate gradient components on the rayon pool.
    pub parallel: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            grad_tol: 1e-6,
            cost_tol: 1e-9,
            fd_step: 1e-6,
            armijo: 1e-4,
            shrink: 0.5,
            max_backtracks: 60,
            substeps: 4,
            parallel: true,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<(), String> {
        let mut bad = Vec::new();
        if self.max_iterations == 0 {
            bad.push("solver.max_iterations must be positive".to_string());
        }
        if self.substeps == 0 {
            bad.push("solver.substeps must be positive".to_string());
        }
        if !(self.fd_step > 0.0) {
            bad.push("solver.fd_step must be positive".to_string());
        }
        if !(self.armijo > 0.0 && self.armijo < 1.0) {
            bad.push("solver.armijo must lie in (0, 1)".to_string());
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            bad.push("solver.shrink must lie in (0, 1)".to_string());
        }
        if !(self.grad_tol >= 0.0 && self.cost_tol >= 0.0) {
            bad.push("solver tolerances must be non-negative".to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(bad.join("; "))
        }
    }
}

/// One instance of the OCP at time `t_hat` from state `x_hat`.
#[derive(Debug, Clone)]
pub struct OcpProblem {
    pub plant: Arc<dyn PlantModel>,
    pub cost: StageCostSpec,
    pub t_hat: f64,
    pub x_hat: Vec<f64>,
    pub horizon: f64,
    pub control_step: f64,
    pub bound: f64,
    pub solver: SolverOptions,
}

/// Number of whole steps of length `step` in `span`, if `span` is (up to
/// rounding) an integer multiple of it.
pub fn whole_steps(span: f64, step: f64) -> Option<usize> {
    if !(span > 0.0 && step > 0.0) {
        return None;
    }
    let n = (span / step).round();
    ((n * step - span).abs() <= 1e-9 * span.max(1.0) && n >= 1.0).then_some(n as usize)
}

impl OcpProblem {
    /// Number of control intervals `N = T / delta`.
    pub fn intervals(&self) -> Result<usize, OcpError> {
        whole_steps(self.horizon, self.control_step).ok_or_else(|| {
            OcpError::InvalidProblem(format!(
                "horizon {} is not a positive multiple of the control step {}",
                self.horizon, self.control_step
            ))
        })
    }

    fn validate(&self) -> Result<usize, OcpError> {
        let n = self.intervals()?;
        if !(self.bound > 0.0 && self.bound.is_finite()) {
            return Err(OcpError::InvalidProblem(format!(
                "bound must be positive, got {}",
                self.bound
            )));
        }
        if self.x_hat.len() != self.plant.dim() {
            return Err(OcpError::InvalidProblem(format!(
                "state has length {}, plant dimension is {}",
                self.x_hat.len(),
                self.plant.dim()
            )));
        }
        self.cost.validate()?;
        self.solver.validate().map_err(OcpError::InvalidProblem)?;
        Ok(n)
    }

    fn sequence(&self, values: Vec<f64>) -> ControlSequence {
        ControlSequence {
            t_start: self.t_hat,
            step: self.control_step,
            values,
            bound: self.bound,
        }
    }

    /// Surrogate assigned to inputs whose prediction diverges.
    fn diverged_cost(&self) -> f64 {
        self.cost.cap * 1e8
    }

    /// RK4 prediction from `x_hat` under the given levels.
    pub fn predict(&self, values: &[f64]) -> Result<Trajectory, SimError> {
        integrate_fixed(
            self.plant.as_ref(),
            &self.x_hat,
            &self.sequence(values.to_vec()),
            self.solver.substeps,
        )
    }

    /// Objective value of a level vector; `None` if the prediction diverged.
    pub fn objective(&self, values: &[f64]) -> Result<Option<RunningCost>, OcpError> {
        match self.predict(values) {
            Ok(traj) => Ok(Some(running_cost(&self.cost, &traj)?)),
            Err(SimError::Divergence { .. }) => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    fn scalar_objective(&self, values: &[f64]) -> Result<f64, OcpError> {
        Ok(self.objective(values)?.map_or(self.diverged_cost(), |c| c.value()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    ProjectedGradient,
    CostStalled,
    LineSearchFailed,
    IterationLimit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverStats {
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub termination: Termination,
    /// Cost of each initial iterate tried, in order.
    pub initial_costs: Vec<f64>,
    /// Final cost reached from each initial iterate.
    pub final_costs: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct OcpSolution {
    pub controls: ControlSequence,
    /// Running cost of the prediction (penalized surrogate when infeasible).
    pub cost_value: f64,
    pub feasible: bool,
    pub predicted: Trajectory,
    pub stats: SolverStats,
}

struct Descent {
    values: Vec<f64>,
    cost: f64,
    iterations: usize,
    evaluations: usize,
    termination: Termination,
}

#[inline]
fn clamp_all(values: &mut [f64], bound: f64) {
    for v in values {
        *v = v.clamp(-bound, bound);
    }
}

fn gradient(p: &OcpProblem, x: &[f64], fx: f64) -> Result<Vec<f64>, OcpError> {
    let h = p.solver.fd_step * p.bound.max(1.0);
    let component = |j: usize| -> Result<f64, OcpError> {
        let mut xj = x.to_vec();
        // Step inward at the upper bound so the probe stays admissible.
        let hj = if x[j] + h > p.bound { -h } else { h };
        xj[j] += hj;
        Ok((p.scalar_objective(&xj)? - fx) / hj)
    };
    if p.solver.parallel {
        (0..x.len()).into_par_iter().map(component).collect()
    } else {
        (0..x.len()).map(component).collect()
    }
}

fn max_norm(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn descend(p: &OcpProblem, start: Vec<f64>) -> Result<Descent, OcpError> {
    let opts = &p.solver;
    let m = p.bound;
    let n = start.len();
    let mut x = start;
    clamp_all(&mut x, m);
    let mut fx = p.scalar_objective(&x)?;
    let mut evaluations = 1;
    let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;
    let mut alpha_prev = f64::NAN;
    let mut termination = Termination::IterationLimit;
    let mut iterations = 0;

    while iterations < opts.max_iterations {
        let g = gradient(p, &x, fx)?;
        evaluations += n;
        let pg = max_norm((0..n).map(|j| x[j] - (x[j] - g[j]).clamp(-m, m)));
        if pg < opts.grad_tol {
            termination = Termination::ProjectedGradient;
            break;
        }

        // Barzilai-Borwein trial step, falling back to a step that moves the
        // largest component across the full input range.
        let full_range = m / max_norm(g.iter().copied()).max(f64::MIN_POSITIVE);
        let mut alpha = match &prev {
            Some((xp, gp)) => {
                let (mut ss, mut sy) = (0.0, 0.0);
                for j in 0..n {
                    let s = x[j] - xp[j];
                    ss += s * s;
                    sy += s * (g[j] - gp[j]);
                }
                if sy > 0.0 {
                    (ss / sy).min(full_range)
                } else {
                    (2.0 * alpha_prev).min(full_range)
                }
            }
            None => full_range,
        };

        let mut accepted = None;
        let mut trial = vec![0.0; n];
        for _ in 0..opts.max_backtracks {
            let mut slope = 0.0;
            for j in 0..n {
                trial[j] = (x[j] - alpha * g[j]).clamp(-m, m);
                slope += g[j] * (trial[j] - x[j]);
            }
            if slope == 0.0 {
                break;
            }
            let ft = p.scalar_objective(&trial)?;
            evaluations += 1;
            if ft <= fx + opts.armijo * slope {
                accepted = Some(ft);
                break;
            }
            alpha *= opts.shrink;
        }
        iterations += 1;

        let Some(ft) = accepted else {
            termination = Termination::LineSearchFailed;
            break;
        };
        let decrease = fx - ft;
        prev = Some((std::mem::replace(&mut x, trial), g));
        fx = ft;
        alpha_prev = alpha;
        if decrease < opts.cost_tol {
            termination = Termination::CostStalled;
            break;
        }
    }

    Ok(Descent {
        values: x,
        cost: fx,
        iterations,
        evaluations,
        termination,
    })
}

/// Solves the OCP from the warm start (if any) and from the zero sequence,
/// returning the better result.
pub fn solve_ocp(p: &OcpProblem, warm_start: Option<&ControlSequence>) -> Result<OcpSolution, OcpError> {
    let n = p.validate()?;
    let mut starts = Vec::with_capacity(2);
    if let Some(w) = warm_start {
        if w.len() != n || (w.step - p.control_step).abs() > 1e-12 * p.control_step {
            return Err(OcpError::InvalidProblem(format!(
                "warm start has {} levels of step {}, expected {} of step {}",
                w.len(),
                w.step,
                n,
                p.control_step
            )));
        }
        starts.push(w.values.clone());
    }
    starts.push(vec![0.0; n]);

    let mut best: Option<Descent> = None;
    let mut stats = SolverStats {
        iterations: 0,
        evaluations: 0,
        converged: false,
        termination: Termination::IterationLimit,
        initial_costs: Vec::new(),
        final_costs: Vec::new(),
    };
    for start in starts {
        let mut clamped = start;
        clamp_all(&mut clamped, p.bound);
        stats.initial_costs.push(p.scalar_objective(&clamped)?);
        let run = descend(p, clamped)?;
        stats.iterations += run.iterations;
        stats.evaluations += run.evaluations + 1;
        stats.final_costs.push(run.cost);
        if best.as_ref().is_none_or(|b| run.cost < b.cost) {
            best = Some(run);
        }
    }
    let best = best.expect("at least the zero start is tried");
    if best.cost >= p.diverged_cost() {
        return Err(OcpError::AllEvaluationsDiverged);
    }
    stats.termination = best.termination;
    stats.converged = matches!(
        best.termination,
        Termination::ProjectedGradient | Termination::CostStalled
    );

    let predicted = p.predict(&best.values)?;
    let feasible = running_cost(&p.cost, &predicted)?.is_feasible();
    Ok(OcpSolution {
        controls: p.sequence(best.values),
        cost_value: best.cost,
        feasible,
        predicted,
        stats,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    /// Some level reaches the input bound.
    Bound,
    /// Error left funnel 0 or the error derivative left funnel 1.
    Funnel(usize),
    /// The simulation failed.
    Integration,
}

impl std::fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ViolationKind::Bound => f.write_str("bound"),
            ViolationKind::Funnel(i) => write!(f, "funnel {i}"),
            ViolationKind::Integration => f.write_str("integration"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Admissibility {
    /// Smallest margins to `psi0` and `psi1` over the horizon.
    Yes(f64, f64),
    No {
        t: f64,
        which: ViolationKind,
        detail: Option<String>,
    },
}

impl Admissibility {
    pub fn is_yes(&self) -> bool {
        matches!(self, Admissibility::Yes(..))
    }
}

/// Checks whether `u` keeps the error and its derivative strictly inside
/// both funnels over the horizon with `|u| < M`, simulating with the adaptive
/// integrator.
pub fn admissible(p: &OcpProblem, u: &ControlSequence, opts: &AdaptiveOptions) -> Result<Admissibility, OcpError> {
    let span_tol = 1e-9 * p.horizon.max(1.0);
    if (u.t_start - p.t_hat).abs() > span_tol || (u.t_end() - (p.t_hat + p.horizon)).abs() > span_tol {
        return Err(OcpError::InvalidProblem(format!(
            "control spans [{}, {}], horizon is [{}, {}]",
            u.t_start,
            u.t_end(),
            p.t_hat,
            p.t_hat + p.horizon
        )));
    }
    if let Some(k) = u.values.iter().position(|v| !(v.abs() < p.bound)) {
        return Ok(Admissibility::No {
            t: u.switch_time(k),
            which: ViolationKind::Bound,
            detail: None,
        });
    }
    let traj = match integrate_adaptive(p.plant.as_ref(), &p.x_hat, u, opts) {
        Ok(t) => t,
        Err(e) => {
            return Ok(Admissibility::No {
                t: p.t_hat,
                which: ViolationKind::Integration,
                detail: Some(e.to_string()),
            })
        }
    };
    let (mut m0, mut m1) = (f64::INFINITY, f64::INFINITY);
    for i in 0..traj.len() {
        let t = traj.times[i];
        let (e0, e1) = p.cost.errors(t, traj.outputs[i], traj.output_rates[i]);
        match p.cost.funnels.membership(t, e0, e1) {
            Membership::Inside(a, b) => {
                m0 = m0.min(a);
                m1 = m1.min(b);
            }
            Membership::Outside(which) => {
                return Ok(Admissibility::No {
                    t,
                    which: ViolationKind::Funnel(which),
                    detail: None,
                })
            }
        }
    }
    Ok(Admissibility::Yes(m0, m1))
}

/// Drops the first `shift` levels and pads with copies of the last level.
pub fn shift_warm_start(prev: &ControlSequence, shift: usize) -> Result<ControlSequence, OcpError> {
    let n = prev.len();
    if shift >= n {
        return Err(OcpError::InvalidProblem(format!(
            "cannot shift {shift} of {n} intervals"
        )));
    }
    let last = prev.values[n - 1];
    let values = prev.values[shift..]
        .iter()
        .copied()
        .chain(std::iter::repeat_n(last, shift))
        .collect();
    Ok(ControlSequence {
        t_start: prev.switch_time(shift),
        step: prev.step,
        values,
        bound: prev.bound,
    })
}
