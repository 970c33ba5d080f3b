//! Performance funnel boundaries and membership tests.
//!
//! A funnel is the time-varying tube `{(t, e) : |e| < psi(t)}`. Tracking of a
//! relative-degree-two output uses a pair of them: `psi0` bounds the error,
//! `psi1` bounds its derivative.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::FunnelError;

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Radius of a funnel as a function of time, together with its derivative.
#[derive(Clone)]
pub enum BoundaryFunction {
    /// `t -> a * exp(-b t) + c`
    Exponential {
        a: f64,
        b: f64,
        c: f64,
    },
    Constant(f64),
    /// User-supplied value and derivative callables.
    Custom {
        value: ScalarFn,
        derivative: ScalarFn,
    },
}

impl fmt::Debug for BoundaryFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Exponential { a, b, c } => write!(f, "Exponential({a}, {b}, {c})"),
            Self::Constant(c) => write!(f, "Constant({c})"),
            Self::Custom { .. } => f.write_str("Custom"),
        }
    }
}

impl BoundaryFunction {
    pub fn exponential(a: f64, b: f64, c: f64) -> Self {
        Self::Exponential { a, b, c }
    }

    pub fn constant(c: f64) -> Self {
        Self::Constant(c)
    }

    pub fn custom<V, D>(value: V, derivative: D) -> Self
    where
        V: Fn(f64) -> f64 + Send + Sync + 'static,
        D: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        Self::Custom {
            value: Arc::new(value),
            derivative: Arc::new(derivative),
        }
    }

    /// Radius at `t`. No domain check; see [`BoundaryFunction::eval`].
    #[inline]
    pub fn value(&self, t: f64) -> f64 {
        match self {
            Self::Exponential { a, b, c } => a * (-b * t).exp() + c,
            Self::Constant(c) => *c,
            Self::Custom { value, .. } => value(t),
        }
    }

    #[inline]
    pub fn derivative(&self, t: f64) -> f64 {
        match self {
            Self::Exponential { a, b, .. } => -a * b * (-b * t).exp(),
            Self::Constant(_) => 0.0,
            Self::Custom { derivative, .. } => derivative(t),
        }
    }

    /// Returns `(radius, radius_derivative)` at `t >= 0`.
    pub fn eval(&self, t: f64) -> Result<(f64, f64), FunnelError> {
        if !(t >= 0.0) {
            return Err(FunnelError::NegativeTime(t));
        }
        Ok((self.value(t), self.derivative(t)))
    }

    /// Checks `inf psi > 0` on the sampling grid.
    ///
    /// Returns the sampled infimum, or the first grid point where the radius is
    /// not strictly positive (or not finite).
    pub fn validate_g0(&self, grid: &TimeGrid) -> Result<G0Check, FunnelError> {
        let mut inf = f64::INFINITY;
        for t in grid.iter() {
            let v = self.value(t);
            let dv = self.derivative(t);
            if !(v > 0.0) || !v.is_finite() || !dv.is_finite() {
                return Ok(G0Check::Violation(t));
            }
            inf = inf.min(v);
        }
        Ok(G0Check::Ok(inf))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum G0Check {
    Ok(f64),
    Violation(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum G1Check {
    /// Smallest sampled `psi1(t) + psi0'(t)`.
    Ok(f64),
    Violation(f64),
}

/// A strictly increasing sampling grid starting at a non-negative time.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid(Vec<f64>);

impl TimeGrid {
    pub fn new(points: Vec<f64>) -> Result<Self, FunnelError> {
        if points.is_empty() {
            return Err(FunnelError::InvalidGrid("empty grid".into()));
        }
        if !(points[0] >= 0.0) {
            return Err(FunnelError::InvalidGrid(format!(
                "grid starts at negative time {}",
                points[0]
            )));
        }
        if let Some(w) = points.windows(2).find(|w| !(w[1] > w[0])) {
            return Err(FunnelError::InvalidGrid(format!(
                "grid not strictly increasing at {} -> {}",
                w[0], w[1]
            )));
        }
        Ok(Self(points))
    }

    /// `start, start + step, ...` up to and including `end` (within half a step).
    pub fn uniform(start: f64, end: f64, step: f64) -> Result<Self, FunnelError> {
        if !(step > 0.0) || !(end >= start) {
            return Err(FunnelError::InvalidGrid(format!(
                "bad uniform grid [{start}, {end}] step {step}"
            )));
        }
        let n = ((end - start) / step + 0.5).floor() as usize;
        Self::new((0..=n).map(|i| start + i as f64 * step).collect())
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.0.iter().copied()
    }

    pub fn points(&self) -> &[f64] {
        &self.0
    }
}

/// Result of a funnel membership test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Membership {
    /// Distances `(psi0 - |e0|, psi1 - |e1|)` to the boundaries.
    Inside(f64, f64),
    /// Index of the first funnel that failed (0 is checked first).
    Outside(usize),
}

impl Membership {
    pub fn is_inside(&self) -> bool {
        matches!(self, Membership::Inside(..))
    }
}

/// The boundary pair `(psi0, psi1)` for the error and its derivative.
#[derive(Debug, Clone)]
pub struct FunnelPair {
    pub psi0: BoundaryFunction,
    pub psi1: BoundaryFunction,
    /// Certified margin of the derivative-funnel condition; set by
    /// [`FunnelPair::validate_g1`].
    pub epsilon: Option<f64>,
}

impl FunnelPair {
    pub fn new(psi0: BoundaryFunction, psi1: BoundaryFunction) -> Self {
        Self {
            psi0,
            psi1,
            epsilon: None,
        }
    }

    /// `psi0 = 3 e^{-2t} + 0.1`, `psi1 = 6 e^{-t} + 0.1`, used by the
    /// mass-on-car benchmark.
    pub fn benchmark() -> Self {
        Self::new(
            BoundaryFunction::exponential(3.0, 2.0, 0.1),
            BoundaryFunction::exponential(6.0, 1.0, 0.1),
        )
    }

    /// Checks `psi1(t) >= eps - psi0'(t)` for some `eps > 0` on the grid.
    ///
    /// On success the best margin is stored in `self.epsilon`.
    pub fn validate_g1(&mut self, grid: &TimeGrid) -> Result<G1Check, FunnelError> {
        for (idx, b) in [&self.psi0, &self.psi1].into_iter().enumerate() {
            if let G0Check::Violation(t) = b.validate_g0(grid)? {
                return Err(FunnelError::G0Violation { funnel: idx, t });
            }
        }
        let mut best = f64::INFINITY;
        for t in grid.iter() {
            let slack = self.psi1.value(t) + self.psi0.derivative(t);
            if !(slack > 0.0) {
                return Ok(G1Check::Violation(t));
            }
            best = best.min(slack);
        }
        self.epsilon = Some(best);
        Ok(G1Check::Ok(best))
    }

    pub fn in_funnel(&self, t: f64, e0: f64, e1: f64) -> Result<Membership, FunnelError> {
        if !(t >= 0.0) {
            return Err(FunnelError::NegativeTime(t));
        }
        Ok(self.membership(t, e0, e1))
    }

    /// Same as [`FunnelPair::in_funnel`] without the domain check on `t`.
    #[inline]
    pub fn membership(&self, t: f64, e0: f64, e1: f64) -> Membership {
        let m0 = self.psi0.value(t) - e0.abs();
        if !(m0 > 0.0) {
            return Membership::Outside(0);
        }
        let m1 = self.psi1.value(t) - e1.abs();
        if !(m1 > 0.0) {
            return Membership::Outside(1);
        }
        Membership::Inside(m0, m1)
    }
}

/// Serializable description of a closed-form boundary, as it appears in
/// experiment config files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BoundarySpec {
    Exponential { a: f64, b: f64, c: f64 },
    Constant { c: f64 },
}

impl From<BoundarySpec> for BoundaryFunction {
    fn from(spec: BoundarySpec) -> Self {
        match spec {
            BoundarySpec::Exponential { a, b, c } => BoundaryFunction::exponential(a, b, c),
            BoundarySpec::Constant { c } => BoundaryFunction::constant(c),
        }
    }
}
