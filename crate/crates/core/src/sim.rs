//! Forward simulation under piecewise-constant inputs.
//!
//! Two integrators share the same sampling convention: the input recorded at
//! a sample is the level that holds from that instant on (right-continuous),
//! so a sample sitting on a switch time carries the new level.

use crate::error::SimError;
use crate::plant::{dot, PlantModel};

/// Piecewise-constant input with `values.len()` levels of duration `step`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSequence {
    pub t_start: f64,
    pub step: f64,
    pub values: Vec<f64>,
    pub bound: f64,
}

impl ControlSequence {
    pub fn new(t_start: f64, step: f64, values: Vec<f64>, bound: f64) -> Result<Self, SimError> {
        if !(step > 0.0 && step.is_finite()) {
            return Err(SimError::InvalidArgument(format!(
                "control step must be positive, got {step}"
            )));
        }
        if values.is_empty() {
            return Err(SimError::InvalidArgument("control sequence is empty".into()));
        }
        if !(bound >= 0.0) {
            return Err(SimError::InvalidArgument(format!(
                "bound must be non-negative, got {bound}"
            )));
        }
        if let Some(v) = values.iter().find(|v| !(v.abs() <= bound)) {
            return Err(SimError::InvalidArgument(format!("level {v} exceeds bound {bound}")));
        }
        Ok(Self {
            t_start,
            step,
            values,
            bound,
        })
    }

    /// All levels zero.
    pub fn zeros(t_start: f64, step: f64, len: usize, bound: f64) -> Result<Self, SimError> {
        Self::new(t_start, step, vec![0.0; len], bound)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Start time of interval `k`.
    #[inline]
    pub fn switch_time(&self, k: usize) -> f64 {
        self.t_start + k as f64 * self.step
    }

    pub fn t_end(&self) -> f64 {
        self.switch_time(self.len())
    }

    /// Level in force at `t` (right-continuous; clamped to the first and last
    /// level outside the span).
    pub fn level_at(&self, t: f64) -> f64 {
        let k = ((t - self.t_start) / self.step).floor();
        let k = if k < 0.0 { 0 } else { (k as usize).min(self.len() - 1) };
        self.values[k]
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Sampled response `(t, x, y, y', u)` of a simulation run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub dim: usize,
    pub times: Vec<f64>,
    /// Row-major, `dim` entries per sample.
    pub states: Vec<f64>,
    pub outputs: Vec<f64>,
    pub output_rates: Vec<f64>,
    pub inputs: Vec<f64>,
}

impl Trajectory {
    pub fn with_capacity(dim: usize, cap: usize) -> Self {
        Self {
            dim,
            times: Vec::with_capacity(cap),
            states: Vec::with_capacity(cap * dim),
            outputs: Vec::with_capacity(cap),
            output_rates: Vec::with_capacity(cap),
            inputs: Vec::with_capacity(cap),
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn last_state(&self) -> Option<&[f64]> {
        (!self.is_empty()).then(|| self.state(self.len() - 1))
    }

    /// Records a sample, computing `y` and `y'` from the plant.
    pub fn push(&mut self, pm: &dyn PlantModel, t: f64, x: &[f64], u: f64, scratch: &mut Scratch) {
        pm.rate(x, u, &mut scratch.rate);
        pm.output_gradient(x, &mut scratch.grad);
        self.times.push(t);
        self.states.extend_from_slice(x);
        self.outputs.push(pm.output(x));
        self.output_rates.push(dot(&scratch.grad, &scratch.rate));
        self.inputs.push(u);
    }

    /// Appends a segment that starts where `self` ends. The shared sample is
    /// taken from `segment` so that it carries the new input level.
    pub fn append_segment(&mut self, segment: &Trajectory) {
        if let (Some(&last), Some(&first)) = (self.times.last(), segment.times.first()) {
            if last == first {
                self.times.pop();
                self.states.truncate(self.states.len() - self.dim);
                self.outputs.pop();
                self.output_rates.pop();
                self.inputs.pop();
            }
        }
        self.times.extend_from_slice(&segment.times);
        self.states.extend_from_slice(&segment.states);
        self.outputs.extend_from_slice(&segment.outputs);
        self.output_rates.extend_from_slice(&segment.output_rates);
        self.inputs.extend_from_slice(&segment.inputs);
    }

    /// Largest deviation between stored `(y, y')` and values recomputed from
    /// the stored states and inputs.
    pub fn consistency_error(&self, pm: &dyn PlantModel) -> f64 {
        let mut scratch = Scratch::new(self.dim);
        let mut worst = 0.0f64;
        for i in 0..self.len() {
            let x = self.state(i);
            pm.rate(x, self.inputs[i], &mut scratch.rate);
            pm.output_gradient(x, &mut scratch.grad);
            worst = worst
                .max((pm.output(x) - self.outputs[i]).abs())
                .max((dot(&scratch.grad, &scratch.rate) - self.output_rates[i]).abs());
        }
        worst
    }
}

/// Reusable buffers for derivative evaluations.
#[derive(Debug, Clone)]
pub struct Scratch {
    rate: Vec<f64>,
    grad: Vec<f64>,
}

impl Scratch {
    pub fn new(dim: usize) -> Self {
        Self {
            rate: vec![0.0; dim],
            grad: vec![0.0; dim],
        }
    }
}

fn check_initial(pm: &dyn PlantModel, x0: &[f64]) -> Result<(), SimError> {
    if x0.len() != pm.dim() {
        return Err(SimError::InvalidArgument(format!(
            "initial state has length {}, plant dimension is {}",
            x0.len(),
            pm.dim()
        )));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(SimError::InvalidArgument("initial state is not finite".into()));
    }
    Ok(())
}

/// Input recorded for the sample closing interval `k`.
#[inline]
fn next_level(u: &ControlSequence, k: usize) -> f64 {
    u.values[(k + 1).min(u.len() - 1)]
}

/// Classical RK4 with exactly `substeps` equal steps per control interval.
pub fn integrate_fixed(
    pm: &dyn PlantModel,
    x0: &[f64],
    u: &ControlSequence,
    substeps: usize,
) -> Result<Trajectory, SimError> {
    if substeps == 0 {
        return Err(SimError::InvalidArgument("substeps must be at least 1".into()));
    }
    check_initial(pm, x0)?;
    let n = pm.dim();
    let mut traj = Trajectory::with_capacity(n, u.len() * substeps + 1);
    let mut scratch = Scratch::new(n);
    let mut rk = Rk4::new(n);
    let mut x = x0.to_vec();
    let h = u.step / substeps as f64;

    traj.push(pm, u.t_start, &x, u.values[0], &mut scratch);
    for (k, &level) in u.values.iter().enumerate() {
        let t_k = u.switch_time(k);
        for j in 1..=substeps {
            rk.step(pm, &mut x, level, h);
            let (t, recorded) = if j == substeps {
                (u.switch_time(k + 1), next_level(u, k))
            } else {
                (t_k + j as f64 * h, level)
            };
            if x.iter().any(|v| !v.is_finite()) {
                return Err(SimError::Divergence {
                    last_finite_t: *traj.times.last().unwrap(),
                });
            }
            traj.push(pm, t, &x, recorded, &mut scratch);
        }
    }
    Ok(traj)
}

struct Rk4 {
    k: [Vec<f64>; 4],
    tmp: Vec<f64>,
}

impl Rk4 {
    fn new(n: usize) -> Self {
        Self {
            k: std::array::from_fn(|_| vec![0.0; n]),
            tmp: vec![0.0; n],
        }
    }

    #[inline]
    fn step(&mut self, pm: &dyn PlantModel, x: &mut [f64], u: f64, h: f64) {
        let n = x.len();
        let [k1, k2, k3, k4] = &mut self.k;
        let tmp = &mut self.tmp;
        pm.rate(x, u, k1);
        for i in 0..n {
            tmp[i] = x[i] + 0.5 * h * k1[i];
        }
        pm.rate(tmp, u, k2);
        for i in 0..n {
            tmp[i] = x[i] + 0.5 * h * k2[i];
        }
        pm.rate(tmp, u, k3);
        for i in 0..n {
            tmp[i] = x[i] + h * k3[i];
        }
        pm.rate(tmp, u, k4);
        for i in 0..n {
            x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
}

/// Settings for [`integrate_adaptive`].
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct AdaptiveOptions {
    pub rtol: f64,
    pub atol: f64,
    pub max_step: f64,
    /// Steps below this abort with [`SimError::StepUnderflow`].
    pub min_step: f64,
}

impl Default for AdaptiveOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-8,
            atol: 1e-10,
            max_step: 0.01,
            min_step: 1e-12,
        }
    }
}

// Dormand-Prince 5(4) tableau (the plant is autonomous, so the nodes are unused).
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
// 5th minus embedded 4th order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// Adaptive Dormand-Prince 5(4) integration, restarted at every control
/// switch. Every accepted step is sampled, and each switch time is a sample.
pub fn integrate_adaptive(
    pm: &dyn PlantModel,
    x0: &[f64],
    u: &ControlSequence,
    opts: &AdaptiveOptions,
) -> Result<Trajectory, SimError> {
    if !(opts.rtol > 0.0 && opts.atol > 0.0 && opts.max_step > 0.0) {
        return Err(SimError::InvalidArgument(format!(
            "tolerances and max_step must be positive: {opts:?}"
        )));
    }
    check_initial(pm, x0)?;
    let n = pm.dim();
    let mut traj = Trajectory::with_capacity(n, u.len() * 8);
    let mut scratch = Scratch::new(n);
    let mut k: [Vec<f64>; 7] = std::array::from_fn(|_| vec![0.0; n]);
    let mut tmp = vec![0.0; n];
    let mut x_new = vec![0.0; n];
    let mut x = x0.to_vec();
    let mut h = opts.max_step.min(u.step);

    traj.push(pm, u.t_start, &x, u.values[0], &mut scratch);
    for (idx, &level) in u.values.iter().enumerate() {
        let t_end = u.switch_time(idx + 1);
        let mut t = u.switch_time(idx);
        // FSAL is reset at every switch since the input changes.
        pm.rate(&x, level, &mut k[0]);
        loop {
            let remaining = t_end - t;
            let last = h >= remaining * (1.0 - 1e-12);
            let step = if last { remaining } else { h.min(opts.max_step) };

            #[allow(clippy::needless_range_loop)]
            for s in 1..7 {
                let (head, tail) = k.split_at_mut(s);
                for i in 0..n {
                    tmp[i] = x[i] + step * head.iter().zip(&A[s]).map(|(kj, a)| a * kj[i]).sum::<f64>();
                }
                pm.rate(&tmp, level, &mut tail[0]);
            }
            x_new.copy_from_slice(&tmp);
            // k[6] was evaluated at x_new (FSAL stage).
            let mut err = 0.0;
            for i in 0..n {
                let mut e = 0.0;
                for s in 0..7 {
                    e += E[s] * k[s][i];
                }
                let sc = opts.atol + opts.rtol * x[i].abs().max(x_new[i].abs());
                let r = step * e / sc;
                err += r * r;
            }
            let err = (err / n as f64).sqrt();

            if !err.is_finite() || x_new.iter().any(|v| !v.is_finite()) {
                // Treat as a rejected step first; only report divergence once
                // the step collapses.
                h = step * 0.2;
                if h < opts.min_step {
                    return Err(SimError::Divergence { last_finite_t: t });
                }
                continue;
            }

            if err <= 1.0 {
                t = if last { t_end } else { t + step };
                std::mem::swap(&mut x, &mut x_new);
                let (first, rest) = k.split_at_mut(6);
                first[0].copy_from_slice(&rest[0]);
                let recorded = if last { next_level(u, idx) } else { level };
                traj.push(pm, t, &x, recorded, &mut scratch);
                let fac = if err == 0.0 {
                    5.0
                } else {
                    (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
                };
                h = if last { h.max(step * fac) } else { step * fac }.min(opts.max_step);
                if last {
                    break;
                }
            } else {
                h = step * (0.9 * err.powf(-0.2)).clamp(0.2, 1.0);
                if h < opts.min_step {
                    return Err(SimError::StepUnderflow { t, step: h });
                }
            }
        }
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::{FnPlant, MassOnCar, MassOnCarParams};
    use std::f64::consts::PI;

    fn car() -> MassOnCar {
        MassOnCar::new(MassOnCarParams::benchmark()).unwrap()
    }

    #[test]
    fn control_sequence_validation() {
        assert!(ControlSequence::new(0.0, 0.0, vec![1.0], 1.0).is_err());
        assert!(ControlSequence::new(0.0, 0.1, vec![], 1.0).is_err());
        assert!(ControlSequence::new(0.0, 0.1, vec![2.0], 1.0).is_err());
        let u = ControlSequence::new(1.0, 0.5, vec![1.0, -1.0, 0.5], 1.0).unwrap();
        assert_eq!(u.t_end(), 2.5);
        assert_eq!(u.level_at(1.0), 1.0);
        assert_eq!(u.level_at(1.5), -1.0);
        assert_eq!(u.level_at(2.4), 0.5);
        assert_eq!(u.level_at(9.0), 0.5);
    }

    #[test]
    fn equilibrium_stays_at_rest() {
        let p = car();
        let u = ControlSequence::zeros(0.0, 0.04, 10, 30.0).unwrap();
        let traj = integrate_fixed(&p, &[0.0; 4], &u, 4).unwrap();
        assert_eq!(traj.len(), 41);
        assert!(traj.states.iter().chain(&traj.outputs).all(|v| *v == 0.0));

        let u = ControlSequence::zeros(0.0, 7.0, 1, 30.0).unwrap();
        let traj = integrate_adaptive(&p, &[0.0; 4], &u, &AdaptiveOptions::default()).unwrap();
        assert!(traj.states.iter().all(|v| v.abs() <= 1e-10));
    }

    #[test]
    fn fixed_sampling_layout() {
        let p = car();
        let u = ControlSequence::new(0.2, 0.04, vec![1.0, -2.0, 3.0], 30.0).unwrap();
        let traj = integrate_fixed(&p, &[0.0; 4], &u, 4).unwrap();
        assert_eq!(traj.len(), 13);
        assert_eq!(traj.times[0], 0.2);
        assert_eq!(traj.times[4], u.switch_time(1));
        assert_eq!(traj.times[12], u.t_end());
        assert_eq!(&traj.inputs[..5], &[1.0, 1.0, 1.0, 1.0, -2.0]);
        assert_eq!(traj.inputs[12], 3.0);
        assert!(traj.consistency_error(&p) <= 1e-12);
    }

    #[test]
    fn harmonic_period_fixed_step() {
        let p = FnPlant::harmonic_oscillator();
        let u = ControlSequence::zeros(0.0, 2.0 * PI / 10.0, 10, 0.0).unwrap();
        // 10 intervals of 629 substeps: step just under 1e-3.
        let traj = integrate_fixed(&p, &[1.0, 0.0], &u, 629).unwrap();
        let end = traj.last_state().unwrap();
        assert!((end[0] - 1.0).abs() < 1e-8 && end[1].abs() < 1e-8, "{end:?}");
    }

    #[test]
    fn harmonic_period_adaptive() {
        let p = FnPlant::harmonic_oscillator();
        let u = ControlSequence::zeros(0.0, 2.0 * PI, 1, 0.0).unwrap();
        let traj = integrate_adaptive(&p, &[1.0, 0.0], &u, &AdaptiveOptions::default()).unwrap();
        let end = traj.last_state().unwrap();
        assert!((end[0] - 1.0).abs() < 1e-7 && end[1].abs() < 1e-7, "{end:?}");
        assert!(traj
            .times
            .windows(2)
            .all(|w| w[1] > w[0] && w[1] - w[0] <= 0.01 + 1e-15));
    }

    #[test]
    fn short_push_matches_tight_adaptive() {
        let p = car();
        let u = ControlSequence::new(0.0, 0.04, vec![1.0], 30.0).unwrap();
        let fixed = integrate_fixed(&p, &[0.0; 4], &u, 4).unwrap();
        let tight = AdaptiveOptions {
            rtol: 1e-10,
            atol: 1e-12,
            ..Default::default()
        };
        let reference = integrate_adaptive(&p, &[0.0; 4], &u, &tight).unwrap();
        let y = *fixed.outputs.last().unwrap();
        let y_ref = *reference.outputs.last().unwrap();
        assert!(y > 0.0 && y < 1e-3);
        // y(0.04) = 0.04^2 / 18 to leading order; the damper adds ~1%.
        assert!((y - 0.04f64.powi(2) / 18.0).abs() < 0.02 * y);
        assert!((y - y_ref).abs() < 1e-10 * y.max(1.0), "{y} vs {y_ref}");
    }

    #[test]
    fn damped_decay() {
        let p = car();
        let u = ControlSequence::zeros(0.0, 20.0, 1, 0.0).unwrap();
        let traj = integrate_adaptive(&p, &[0.0, 1.0, 0.0, 0.0], &u, &AdaptiveOptions::default()).unwrap();
        let s_end = traj.last_state().unwrap()[1];
        assert!(s_end.abs() < 0.05, "s(20) = {s_end}");

        // Long fixed-step oracle at h = 1e-5.
        let oracle = integrate_fixed(
            &p,
            &[0.0, 1.0, 0.0, 0.0],
            &ControlSequence::zeros(0.0, 0.1, 200, 0.0).unwrap(),
            10_000,
        )
        .unwrap();
        let s_oracle = oracle.last_state().unwrap()[1];
        assert!((s_end - s_oracle).abs() < 1e-6, "{s_end} vs {s_oracle}");
    }

    #[test]
    fn energy_never_increases_without_input() {
        let p = car();
        let u = ControlSequence::zeros(0.0, 10.0, 1, 0.0).unwrap();
        let traj = integrate_adaptive(&p, &[0.0, 1.5, 0.3, -0.2], &u, &AdaptiveOptions::default()).unwrap();
        let energies: Vec<f64> = (0..traj.len()).map(|i| p.energy(traj.state(i))).collect();
        for w in energies.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{} -> {}", w[0], w[1]);
        }
        assert!(energies.last().unwrap() < &(0.5 * energies[0]));
    }

    #[test]
    fn adaptive_samples_every_switch() {
        let p = car();
        let u = ControlSequence::new(0.0, 0.04, vec![30.0, -30.0, 5.0, 0.0, 12.0], 30.0).unwrap();
        let traj = integrate_adaptive(&p, &[0.0; 4], &u, &AdaptiveOptions::default()).unwrap();
        for k in 0..=u.len() {
            assert!(traj.times.contains(&u.switch_time(k)), "missing switch {k}");
        }
        // No sample interval contains a switch strictly inside it.
        for w in traj.times.windows(2) {
            for k in 0..=u.len() {
                let s = u.switch_time(k);
                assert!(!(w[0] < s && s < w[1]));
            }
        }
        assert!(traj.consistency_error(&p) <= 1e-12);
    }

    #[test]
    fn fourth_order_convergence() {
        let p = car();
        let x0 = [0.0, 0.3, 0.0, 0.0];
        let u = ControlSequence::new(0.0, 0.04, vec![1.0], 30.0).unwrap();
        let tight = AdaptiveOptions {
            rtol: 1e-12,
            atol: 1e-14,
            max_step: 1e-3,
            ..Default::default()
        };
        let reference = integrate_adaptive(&p, &x0, &u, &tight).unwrap();
        let x_ref = reference.last_state().unwrap().to_vec();
        let err = |sub| {
            let traj = integrate_fixed(&p, &x0, &u, sub).unwrap();
            traj.last_state()
                .unwrap()
                .iter()
                .zip(&x_ref)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        };
        let (e1, e2) = (err(1), err(2));
        let ratio = e1 / e2;
        assert!((13.0..=19.0).contains(&ratio), "ratio {ratio} ({e1:e}/{e2:e})");
    }

    #[test]
    fn divergence_reported() {
        let p = FnPlant::new(
            "blowup",
            1,
            |x, out| out[0] = x[0] * x[0],
            |_, out| out[0] = 0.0,
            |x| x[0],
            |_, out| out[0] = 1.0,
        );
        let u = ControlSequence::zeros(0.0, 0.5, 6, 0.0).unwrap();
        match integrate_fixed(&p, &[1.0], &u, 50) {
            Err(SimError::Divergence { last_finite_t }) => assert!(last_finite_t < 1.5),
            other => panic!("{other:?}"),
        }
        assert!(integrate_adaptive(&p, &[1.0], &u, &AdaptiveOptions::default()).is_err());
    }
}
