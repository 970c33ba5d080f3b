//! The receding-horizon loop.
//!
//! At each `t_hat` in `t0 + delta N` the OCP is solved from the measured state
//! and its first input level is applied for `delta` seconds. The closed loop
//! is simulated with the adaptive integrator.

use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::{Scheme, StageCostSpec};
use crate::error::{MpcError, OcpOrSim};
use crate::funnel::{FunnelPair, G1Check, Membership, TimeGrid};
use crate::ocp::{
    admissible, shift_warm_start, solve_ocp, whole_steps, Admissibility, OcpProblem, SolverOptions, SolverStats,
};
use crate::plant::{output_and_derivative, PlantModel, ReferenceSignal};
use crate::sim::{integrate_adaptive, AdaptiveOptions, ControlSequence, Scratch, Trajectory};

/// Controller and experiment parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FmpcConfig {
    /// Prediction horizon `T` (s).
    pub horizon: f64,
    /// Time shift `delta` (s); also the length of each input level.
    pub shift: f64,
    /// Input bound `M`.
    pub bound: f64,
    pub lambda_u: f64,
    pub scheme: Scheme,
    pub t0: f64,
    pub x0: Vec<f64>,
    pub t_end: f64,
    pub solver: SolverOptions,
    pub integrator: AdaptiveOptions,
    pub cap: f64,
    pub violation_weight: f64,
}

impl FmpcConfig {
    /// The mass-on-car benchmark settings: `T = 0.6`, `delta = 0.04`, `M = 30`,
    /// `lambda_u = 5e-3` on `[0, 7]` from rest.
    pub fn benchmark(scheme: Scheme) -> Self {
        Self {
            horizon: 0.6,
            shift: 0.04,
            bound: 30.0,
            lambda_u: 5e-3,
            scheme,
            t0: 0.0,
            x0: vec![0.0; 4],
            t_end: 7.0,
            solver: SolverOptions::default(),
            integrator: AdaptiveOptions::default(),
            cap: 1e8,
            violation_weight: 1e6,
        }
    }

    /// All invariant breaches, prefixed with the `controller.` field name.
    pub fn problems(&self) -> Vec<String> {
        let mut bad = Vec::new();
        if !(self.shift > 0.0) {
            bad.push("controller.shift: shift must be positive".to_string());
        }
        if !(self.horizon > self.shift) {
            bad.push("controller.horizon: horizon must exceed the shift".to_string());
        } else if self.shift > 0.0 && whole_steps(self.horizon, self.shift).is_none() {
            bad.push("controller.horizon: horizon not a multiple of shift".to_string());
        }
        if !(self.bound > 0.0 && self.bound.is_finite()) {
            bad.push("controller.bound: bound must be positive".to_string());
        }
        if !(self.lambda_u >= 0.0 && self.lambda_u.is_finite()) {
            bad.push("controller.lambda_u: must be non-negative".to_string());
        }
        if !(self.t0 >= 0.0) {
            bad.push("controller.t0: must be non-negative".to_string());
        }
        if !(self.t_end >= self.t0) {
            bad.push("controller.t_end: must not precede t0".to_string());
        }
        if self.x0.iter().any(|v| !v.is_finite()) {
            bad.push("controller.x0: must be finite".to_string());
        }
        if !(self.cap > 0.0 && self.cap.is_finite()) {
            bad.push("controller.cap: must be positive".to_string());
        }
        if !(self.violation_weight > 0.0 && self.violation_weight.is_finite()) {
            bad.push("controller.violation_weight: must be positive".to_string());
        }
        if let Err(e) = self.solver.validate() {
            bad.push(e);
        }
        let i = &self.integrator;
        if !(i.rtol > 0.0 && i.atol > 0.0 && i.max_step > 0.0 && i.min_step > 0.0) {
            bad.push("integrator: tolerances and step limits must be positive".to_string());
        }
        bad
    }

    pub fn validate(&self) -> Result<(), MpcError> {
        let bad = self.problems();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(MpcError::InvalidConfig(bad.join("; ")))
        }
    }

    pub fn stage_cost(&self, funnels: FunnelPair, reference: ReferenceSignal) -> StageCostSpec {
        StageCostSpec {
            scheme: self.scheme,
            funnels,
            lambda_u: self.lambda_u,
            reference,
            cap: self.cap,
            violation_weight: self.violation_weight,
        }
    }

    /// OCP at `(t0, x0)`; `t_hat` and `x_hat` are replaced at every step.
    pub fn problem(&self, plant: Arc<dyn PlantModel>, funnels: FunnelPair, reference: ReferenceSignal) -> OcpProblem {
        OcpProblem {
            plant,
            cost: self.stage_cost(funnels, reference),
            t_hat: self.t0,
            x_hat: self.x0.clone(),
            horizon: self.horizon,
            control_step: self.shift,
            bound: self.bound,
            solver: self.solver,
        }
    }

    /// Number of MPC steps needed to cover `[t0, t_end]`.
    pub fn steps(&self) -> usize {
        let span = (self.t_end - self.t0) / self.shift;
        (span - 1e-9).ceil().max(0.0) as usize
    }
}

/// Tracking errors `(e0, e1)` of state `x` at `t`.
pub fn tracking_errors(pm: &dyn PlantModel, reference: &ReferenceSignal, t: f64, x: &[f64]) -> (f64, f64) {
    // The input does not enter y' for relative degree two.
    let (y, yd) = output_and_derivative(pm, x, 0.0);
    let (r, rd, _) = reference.eval(t);
    (y - r, yd - rd)
}

/// Whether `(e(t0), e'(t0))` lies strictly inside both funnels.
pub fn check_initial_feasibility(
    funnels: &FunnelPair,
    reference: &ReferenceSignal,
    pm: &dyn PlantModel,
    t0: f64,
    x0: &[f64],
) -> Membership {
    let (e0, e1) = tracking_errors(pm, reference, t0, x0);
    funnels.membership(t0, e0, e1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t_hat: f64,
    pub x_hat: Vec<f64>,
    /// Optimal input over `[t_hat, t_hat + T]`.
    pub controls: Vec<f64>,
    pub cost_value: f64,
    /// The OCP prediction stayed inside the funnels.
    pub feasible: bool,
    pub stats: SolverStats,
    pub wall_time_s: f64,
    /// Level applied on `[t_hat, t_hat + delta)`.
    pub applied: f64,
    /// Smallest signed margins `psi_i - |e_i|` over the applied segment.
    pub margins: (f64, f64),
    /// The applied segment stayed strictly inside both funnels.
    pub segment_inside: bool,
}

impl StepRecord {
    pub fn control_sequence(&self, step: f64, bound: f64) -> ControlSequence {
        ControlSequence {
            t_start: self.t_hat,
            step,
            values: self.controls.clone(),
            bound,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClosedLoopRun {
    pub scheme: Scheme,
    pub trajectory: Trajectory,
    pub steps: Vec<StepRecord>,
    pub feasible_throughout: bool,
}

impl ClosedLoopRun {
    pub fn max_abs_input(&self) -> f64 {
        self.steps.iter().fold(0.0, |m, s| m.max(s.applied.abs()))
    }

    pub fn input_range(&self) -> (f64, f64) {
        self.steps
            .iter()
            .fold((0.0, 0.0), |(lo, hi), s| (lo.min(s.applied), hi.max(s.applied)))
    }

    /// Number of trajectory samples outside funnel 0 and funnel 1.
    pub fn funnel_violations(
        &self,
        funnels: &FunnelPair,
        pm: &dyn PlantModel,
        reference: &ReferenceSignal,
    ) -> (usize, usize) {
        let mut counts = (0, 0);
        for i in 0..self.trajectory.len() {
            let t = self.trajectory.times[i];
            let (e0, e1) = tracking_errors(pm, reference, t, self.trajectory.state(i));
            if !(e0.abs() < funnels.psi0.value(t)) {
                counts.0 += 1;
            }
            if !(e1.abs() < funnels.psi1.value(t)) {
                counts.1 += 1;
            }
        }
        counts
    }
}

/// Runs the receding-horizon loop from `(cfg.t0, cfg.x0)` until `cfg.t_end`.
pub fn run_fmpc(
    cfg: &FmpcConfig,
    plant: Arc<dyn PlantModel>,
    funnels: FunnelPair,
    reference: ReferenceSignal,
) -> Result<ClosedLoopRun, MpcError> {
    cfg.validate()?;
    if cfg.x0.len() != plant.dim() {
        return Err(MpcError::InvalidConfig(format!(
            "x0 has length {}, plant dimension is {}",
            cfg.x0.len(),
            plant.dim()
        )));
    }
    let mut funnels = funnels;
    let grid = TimeGrid::uniform(0.0, cfg.t_end + cfg.horizon, 1e-3)?;
    if let G1Check::Violation(t) = funnels.validate_g1(&grid)? {
        return Err(MpcError::G1Violation(t));
    }
    if let Membership::Outside(i) = check_initial_feasibility(&funnels, &reference, plant.as_ref(), cfg.t0, &cfg.x0) {
        return Err(MpcError::InitiallyInfeasible(i));
    }

    let mut template = cfg.problem(plant.clone(), funnels, reference);
    let n = plant.dim();
    let mut scratch = Scratch::new(n);
    let mut run = ClosedLoopRun {
        scheme: cfg.scheme,
        trajectory: Trajectory::with_capacity(n, cfg.steps() * 8 + 1),
        steps: Vec::with_capacity(cfg.steps()),
        feasible_throughout: true,
    };
    run.trajectory.push(plant.as_ref(), cfg.t0, &cfg.x0, 0.0, &mut scratch);

    let mut x_hat = cfg.x0.clone();
    let mut previous: Option<ControlSequence> = None;
    for k in 0..cfg.steps() {
        let t_hat = cfg.t0 + k as f64 * cfg.shift;
        template.t_hat = t_hat;
        template.x_hat.clone_from(&x_hat);

        let started = Instant::now();
        let warm = match previous.as_ref().map(|p| shift_warm_start(p, 1)).transpose() {
            Ok(w) => w.map(|mut w| {
                w.t_start = t_hat;
                w
            }),
            Err(e) => return Err(abort(run, t_hat, e.into())),
        };
        let solution = match solve_ocp(&template, warm.as_ref()) {
            Ok(s) => s,
            Err(e) => return Err(abort(run, t_hat, e.into())),
        };
        let wall_time_s = started.elapsed().as_secs_f64();

        let applied = solution.controls.values[0];
        let segment_input = ControlSequence {
            t_start: t_hat,
            step: cfg.shift,
            values: vec![applied],
            bound: cfg.bound,
        };
        let mut segment = match integrate_adaptive(plant.as_ref(), &x_hat, &segment_input, &cfg.integrator) {
            Ok(s) => s,
            Err(e) => return Err(abort(run, t_hat, e.into())),
        };
        // Pin the segment end to the next grid time so that it coincides
        // with the next step's start exactly.
        if let Some(t) = segment.times.last_mut() {
            *t = cfg.t0 + (k + 1) as f64 * cfg.shift;
        }

        let mut margins = (f64::INFINITY, f64::INFINITY);
        for i in 0..segment.len() {
            let t = segment.times[i];
            let (e0, e1) = template.cost.errors(t, segment.outputs[i], segment.output_rates[i]);
            margins.0 = margins.0.min(template.cost.funnels.psi0.value(t) - e0.abs());
            margins.1 = margins.1.min(template.cost.funnels.psi1.value(t) - e1.abs());
        }
        let segment_inside = margins.0 > 0.0 && margins.1 > 0.0;
        run.feasible_throughout &= solution.feasible && segment_inside;

        x_hat.copy_from_slice(segment.last_state().expect("segment has samples"));
        run.trajectory.append_segment(&segment);
        run.steps.push(StepRecord {
            t_hat,
            x_hat: template.x_hat.clone(),
            controls: solution.controls.values.clone(),
            cost_value: solution.cost_value,
            feasible: solution.feasible,
            stats: solution.stats,
            wall_time_s,
            applied,
            margins,
            segment_inside,
        });
        previous = Some(solution.controls);
    }
    Ok(run)
}

fn abort(mut run: ClosedLoopRun, t_hat: f64, source: OcpOrSim) -> MpcError {
    run.feasible_throughout = false;
    MpcError::Aborted {
        t_hat,
        partial: Box::new(run),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditViolation {
    pub step: usize,
    pub t_hat: f64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AuditReport {
    pub steps_checked: usize,
    pub violations: Vec<AuditViolation>,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Re-checks every stored OCP solution: the prediction must have been
/// feasible with a finite cost, and the solution must be admissible when
/// re-simulated with the adaptive integrator.
pub fn audit_recursive_feasibility(steps: &[StepRecord], template: &OcpProblem, opts: &AdaptiveOptions) -> AuditReport {
    let mut violations: Vec<AuditViolation> = steps
        .par_iter()
        .enumerate()
        .filter_map(|(idx, step)| {
            let violation = |reason: String| {
                Some(AuditViolation {
                    step: idx,
                    t_hat: step.t_hat,
                    reason,
                })
            };
            if !step.feasible || !(step.cost_value < template.cost.cap) {
                return violation(format!("OCP solution infeasible (cost {:e})", step.cost_value));
            }
            let mut p = template.clone();
            p.t_hat = step.t_hat;
            p.x_hat.clone_from(&step.x_hat);
            let u = step.control_sequence(p.control_step, p.bound);
            match admissible(&p, &u, opts) {
                Ok(Admissibility::Yes(..)) => None,
                Ok(Admissibility::No { t, which, detail }) => violation(match detail {
                    Some(d) => format!("not admissible at t = {t}: {which} ({d})"),
                    None => format!("not admissible at t = {t}: {which}"),
                }),
                Err(e) => violation(e.to_string()),
            }
        })
        .collect();
    violations.sort_by_key(|v| v.step);
    AuditReport {
        steps_checked: steps.len(),
        violations,
    }
}
