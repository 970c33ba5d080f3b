//! Funnel-barrier stage costs and their integral along a trajectory.

use serde::{Deserialize, Serialize};

use crate::error::CostError;
use crate::funnel::FunnelPair;
use crate::plant::ReferenceSignal;
use crate::sim::Trajectory;

/// Largest sample spacing accepted by [`running_cost`].
pub const MAX_SAMPLE_SPACING: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Barrier terms on both the error and its derivative.
    TwoFunnel,
    /// Barrier on the error only (the relative-degree-one cost).
    OneFunnel,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::TwoFunnel => "two_funnel",
            Scheme::OneFunnel => "one_funnel",
        }
    }
}

impl std::str::FromStr for Scheme {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "two_funnel" => Ok(Scheme::TwoFunnel),
            "one_funnel" => Ok(Scheme::OneFunnel),
            other => Err(format!("unknown scheme {other:?}")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StageCostSpec {
    pub scheme: Scheme,
    pub funnels: FunnelPair,
    pub lambda_u: f64,
    pub reference: ReferenceSignal,
    /// Finite stand-in for an infinite cost inside the optimizer.
    pub cap: f64,
    /// Weight of the squared funnel overshoot added on top of `cap`.
    pub violation_weight: f64,
}

impl StageCostSpec {
    pub fn new(scheme: Scheme, funnels: FunnelPair, lambda_u: f64, reference: ReferenceSignal) -> Self {
        Self {
            scheme,
            funnels,
            lambda_u,
            reference,
            cap: 1e8,
            violation_weight: 1e6,
        }
    }

    pub fn validate(&self) -> Result<(), CostError> {
        if !(self.lambda_u >= 0.0 && self.lambda_u.is_finite()) {
            return Err(CostError::InvalidArgument(format!(
                "lambda_u must be >= 0, got {}",
                self.lambda_u
            )));
        }
        if !(self.cap > 0.0 && self.cap.is_finite()) {
            return Err(CostError::InvalidArgument(format!(
                "cap must be positive, got {}",
                self.cap
            )));
        }
        if !(self.violation_weight > 0.0 && self.violation_weight.is_finite()) {
            return Err(CostError::InvalidArgument(format!(
                "violation_weight must be positive, got {}",
                self.violation_weight
            )));
        }
        Ok(())
    }

    /// Tracking errors `(e0, e1)` of the output pair `(zeta0, zeta1)` at `t`.
    #[inline]
    pub fn errors(&self, t: f64, zeta0: f64, zeta1: f64) -> (f64, f64) {
        let (r, rd, _) = self.reference.eval(t);
        (zeta0 - r, zeta1 - rd)
    }

    /// Sum of barrier terms (no input penalty).
    #[inline]
    fn barrier(&self, t: f64, zeta0: f64, zeta1: f64) -> StageCost {
        let (e0, e1) = self.errors(t, zeta0, zeta1);
        let psi0 = self.funnels.psi0.value(t);
        let over0 = e0.abs() - psi0;
        match self.scheme {
            Scheme::OneFunnel => {
                if over0 >= 0.0 || over0.is_nan() {
                    StageCost::Infinite(over0.max(0.0), 0.0)
                } else {
                    StageCost::Finite(1.0 / (1.0 - (e0 / psi0).powi(2)))
                }
            }
            Scheme::TwoFunnel => {
                let psi1 = self.funnels.psi1.value(t);
                let over1 = e1.abs() - psi1;
                if over0 >= 0.0 || over1 >= 0.0 || over0.is_nan() || over1.is_nan() {
                    StageCost::Infinite(over0.max(0.0), over1.max(0.0))
                } else {
                    StageCost::Finite(1.0 / (1.0 - (e0 / psi0).powi(2)) + 1.0 / (1.0 - (e1 / psi1).powi(2)))
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StageCost {
    Finite(f64),
    /// Overshoots `max(0, |e_i| - psi_i)` of the two funnels.
    Infinite(f64, f64),
}

impl StageCost {
    pub fn finite(self) -> Option<f64> {
        match self {
            StageCost::Finite(v) => Some(v),
            StageCost::Infinite(..) => None,
        }
    }
}

/// Stage cost at `(t, (zeta0, zeta1), u)`.
///
/// At or beyond either funnel boundary the cost is infinite.
pub fn stage_cost(spec: &StageCostSpec, t: f64, zeta0: f64, zeta1: f64, u: f64) -> StageCost {
    match spec.barrier(t, zeta0, zeta1) {
        StageCost::Finite(b) => StageCost::Finite(b + spec.lambda_u * u * u),
        inf => inf,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RunningCost {
    Feasible(f64),
    Infeasible {
        first_violation_t: f64,
        penalized_value: f64,
    },
}

impl RunningCost {
    /// The value an optimizer should minimize.
    pub fn value(&self) -> f64 {
        match *self {
            RunningCost::Feasible(v) => v,
            RunningCost::Infeasible { penalized_value, .. } => penalized_value,
        }
    }

    pub fn is_feasible(&self) -> bool {
        matches!(self, RunningCost::Feasible(_))
    }
}

/// Trapezoidal integral of the stage cost over the trajectory samples.
///
/// Sample `i` carries the input held on `[t_i, t_{i+1})`, so the input
/// penalty is integrated exactly per segment. If any sample is outside a
/// funnel the result is `cap * (1 + violating fraction)` plus the weighted
/// integral of squared overshoots.
pub fn running_cost(spec: &StageCostSpec, traj: &Trajectory) -> Result<RunningCost, CostError> {
    if traj.is_empty() {
        return Err(CostError::InvalidArgument("empty trajectory".into()));
    }
    let n = traj.len();
    let mut first_violation = None;
    let mut violating = 0usize;
    let mut overshoot_integral = 0.0;
    let mut integral = 0.0;
    let mut prev_barrier = 0.0;

    for i in 0..n {
        let t = traj.times[i];
        let weight = {
            let left = if i > 0 { t - traj.times[i - 1] } else { 0.0 };
            let right = if i + 1 < n { traj.times[i + 1] - t } else { 0.0 };
            if right > MAX_SAMPLE_SPACING * (1.0 + 1e-9) {
                return Err(CostError::InvalidArgument(format!(
                    "sample spacing {right} at t = {t} exceeds {MAX_SAMPLE_SPACING}"
                )));
            }
            0.5 * (left + right)
        };
        match spec.barrier(t, traj.outputs[i], traj.output_rates[i]) {
            StageCost::Finite(b) => {
                if i > 0 {
                    let dt = t - traj.times[i - 1];
                    let u = traj.inputs[i - 1];
                    integral += 0.5 * dt * (prev_barrier + b) + dt * spec.lambda_u * u * u;
                }
                prev_barrier = b;
            }
            StageCost::Infinite(o0, o1) => {
                first_violation.get_or_insert(t);
                violating += 1;
                overshoot_integral += weight * (o0 * o0 + o1 * o1);
            }
        }
    }

    Ok(match first_violation {
        None => RunningCost::Feasible(integral),
        Some(t) => RunningCost::Infeasible {
            first_violation_t: t,
            penalized_value: spec.cap * (1.0 + violating as f64 / n as f64)
                + spec.violation_weight * overshoot_integral,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::funnel::BoundaryFunction;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn spec(scheme: Scheme, lambda_u: f64) -> StageCostSpec {
        StageCostSpec::new(scheme, FunnelPair::benchmark(), lambda_u, ReferenceSignal::cosine())
    }

    fn traj_from(times: Vec<f64>, outputs: Vec<f64>, rates: Vec<f64>, inputs: Vec<f64>) -> Trajectory {
        let n = times.len();
        Trajectory {
            dim: 1,
            states: vec![0.0; n],
            times,
            outputs,
            output_rates: rates,
            inputs,
        }
    }

    #[test]
    fn unit_values() {
        let two = spec(Scheme::TwoFunnel, 0.37);
        assert_eq!(stage_cost(&two, 0.0, 1.0, 0.0, 0.0), StageCost::Finite(2.0));
        match stage_cost(&two, 0.0, 0.0, 0.0, 0.0) {
            StageCost::Finite(v) => {
                assert_abs_diff_eq!(v, 1.0 + 9.61 / 8.61, epsilon = 1e-14);
                assert_abs_diff_eq!(v, 2.1161450, epsilon = 1e-6);
            }
            other => panic!("{other:?}"),
        }
        // (1 - 3.1) - 1 == -3.1 exactly, so this sits on the pole.
        assert_eq!(
            stage_cost(&two, 0.0, 1.0 - 3.1, 0.0, 0.0),
            StageCost::Infinite(0.0, 0.0)
        );
        // (1 + 3.1) - 1 rounds to just inside the funnel; the barrier is
        // still far above the optimizer cap.
        assert!(stage_cost(&two, 0.0, 1.0 + 3.1, 0.0, 0.0).finite().unwrap() > 1e15);
        let one = spec(Scheme::OneFunnel, 0.37);
        assert_eq!(stage_cost(&one, 0.0, 1.0, 100.0, 0.0), StageCost::Finite(1.0));
        assert_eq!(
            stage_cost(&one, 0.0, 1.0, 0.0, 2.0),
            StageCost::Finite(1.0 + 0.37 * 4.0)
        );
    }

    #[test]
    fn beyond_boundary_is_infinite_with_overshoot() {
        let two = spec(Scheme::TwoFunnel, 0.0);
        match stage_cost(&two, 0.0, 1.0 + 4.1, 7.1, 0.0) {
            StageCost::Infinite(o0, o1) => {
                assert_abs_diff_eq!(o0, 1.0, epsilon = 1e-12);
                assert_abs_diff_eq!(o1, 1.0, epsilon = 1e-12);
            }
            other => panic!("{other:?}"),
        }
        let one = spec(Scheme::OneFunnel, 0.0);
        assert!(matches!(stage_cost(&one, 0.0, -3.0, 0.0, 0.0), StageCost::Infinite(_, o1) if o1 == 0.0));
    }

    #[test]
    fn zero_error_tracking_integrates_to_two() {
        let two = spec(Scheme::TwoFunnel, 0.005);
        let times: Vec<f64> = (0..=100).map(|i| i as f64 * 0.01).collect();
        let outputs = times.iter().map(|t| t.cos()).collect();
        let rates = times.iter().map(|t| -t.sin()).collect();
        let traj = traj_from(times, outputs, rates, vec![0.0; 101]);
        match running_cost(&two, &traj).unwrap() {
            RunningCost::Feasible(v) => assert_abs_diff_eq!(v, 2.0, epsilon = 1e-12),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn constant_error_closed_form() {
        let flat = StageCostSpec::new(
            Scheme::TwoFunnel,
            FunnelPair::new(BoundaryFunction::constant(1.0), BoundaryFunction::constant(1.0)),
            0.0,
            ReferenceSignal::Constant(0.0),
        );
        let times: Vec<f64> = (0..=100).map(|i| i as f64 * 0.01).collect();
        let e = 1.0 / 2.0f64.sqrt();
        let traj = traj_from(times, vec![e; 101], vec![0.0; 101], vec![0.0; 101]);
        match running_cost(&flat, &traj).unwrap() {
            RunningCost::Feasible(v) => assert_abs_diff_eq!(v, 3.0, epsilon = 1e-12),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn input_penalty_uses_held_level() {
        let flat = StageCostSpec::new(
            Scheme::OneFunnel,
            FunnelPair::new(BoundaryFunction::constant(1.0), BoundaryFunction::constant(1.0)),
            0.5,
            ReferenceSignal::Constant(0.0),
        );
        let traj = traj_from(vec![0.0, 0.01, 0.02], vec![0.0; 3], vec![0.0; 3], vec![2.0, 4.0, 0.0]);
        let v = running_cost(&flat, &traj).unwrap().value();
        assert_abs_diff_eq!(v, 0.02 + 0.5 * (4.0 * 0.01 + 16.0 * 0.01), epsilon = 1e-14);
    }

    #[test]
    fn violation_is_penalized_above_cap() {
        let two = spec(Scheme::TwoFunnel, 0.0);
        let times: Vec<f64> = (0..=10).map(|i| i as f64 * 0.01).collect();
        let mut outputs: Vec<f64> = times.iter().map(|t| t.cos()).collect();
        let rates: Vec<f64> = times.iter().map(|t| -t.sin()).collect();
        outputs[6] += 5.0;
        let traj = traj_from(times.clone(), outputs.clone(), rates.clone(), vec![0.0; 11]);
        let shallow = match running_cost(&two, &traj).unwrap() {
            RunningCost::Infeasible {
                first_violation_t,
                penalized_value,
            } => {
                assert_eq!(first_violation_t, times[6]);
                assert!(penalized_value > two.cap);
                penalized_value
            }
            other => panic!("{other:?}"),
        };
        outputs[6] += 1.0;
        let traj = traj_from(times, outputs, rates, vec![0.0; 11]);
        assert!(running_cost(&two, &traj).unwrap().value() > shallow);
    }

    #[test]
    fn argument_errors() {
        let two = spec(Scheme::TwoFunnel, 0.0);
        assert!(running_cost(&two, &Trajectory::default()).is_err());
        let sparse = traj_from(vec![0.0, 0.1], vec![1.0, 1.0], vec![0.0, 0.0], vec![0.0, 0.0]);
        assert!(running_cost(&two, &sparse).is_err());
        let mut bad = spec(Scheme::TwoFunnel, -1.0);
        assert!(bad.validate().is_err());
        bad.lambda_u = 0.0;
        assert!(bad.validate().is_ok());
        bad.cap = 0.0;
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn barrier_monotone_in_each_error(t in 0.0f64..7.0, a in 0.0f64..0.999, b in 0.0f64..0.999, bump in 1e-6f64..1e-3) {
            let two = spec(Scheme::TwoFunnel, 0.005);
            let (r, rd, _) = two.reference.eval(t);
            let p0 = two.funnels.psi0.value(t);
            let p1 = two.funnels.psi1.value(t);
            let base = stage_cost(&two, t, r + a * p0, rd + b * p1, 1.0).finite().unwrap();
            let a2 = (a + bump).min(0.9999);
            let b2 = (b + bump).min(0.9999);
            if a2 > a {
                let up0 = stage_cost(&two, t, r + a2 * p0, rd + b * p1, 1.0).finite().unwrap();
                prop_assert!(up0 > base);
            }
            if b2 > b {
                let up1 = stage_cost(&two, t, r + a * p0, rd + b2 * p1, 1.0).finite().unwrap();
                prop_assert!(up1 > base);
            }
        }

        #[test]
        fn symmetric_and_bounded_below(t in 0.0f64..7.0, a in -0.99f64..0.99, b in -0.99f64..0.99, u in -30.0f64..30.0) {
            let lambda = 0.005;
            let two = spec(Scheme::TwoFunnel, lambda);
            let one = spec(Scheme::OneFunnel, lambda);
            let (r, rd, _) = two.reference.eval(t);
            let e0 = a * two.funnels.psi0.value(t);
            let e1 = b * two.funnels.psi1.value(t);
            let at = |s: &StageCostSpec, e0: f64, e1: f64, u: f64| stage_cost(s, t, r + e0, rd + e1, u).finite().unwrap();
            let v2 = at(&two, e0, e1, u);
            let v1 = at(&one, e0, e1, u);
            // Equal up to the rounding of zeta - y_ref.
            for mirrored in [at(&two, -e0, e1, u), at(&two, e0, -e1, u), at(&two, e0, e1, -u)] {
                prop_assert!((mirrored - v2).abs() <= 1e-10 * v2);
            }
            prop_assert!(v2 >= 2.0 + lambda * u * u);
            prop_assert!(v1 >= 1.0 + lambda * u * u);
            let psi1 = two.funnels.psi1.value(t);
            let second = 1.0 / (1.0 - (e1 / psi1).powi(2));
            prop_assert!((v1 - (v2 - second)).abs() <= 1e-12 * v2.max(1.0));
        }
    }
}
