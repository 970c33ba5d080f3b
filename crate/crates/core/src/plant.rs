//! Control-affine single-input single-output plants
//! `x' = f(x) + g(x) u`, `y = h(x)`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::PlantError;

/// A control-affine SISO plant.
///
/// Implementations must be defined on all of state space. `rate` has a
/// default in terms of `drift` and `input_field`; override it when a fused
/// evaluation is cheaper.
pub trait PlantModel: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;
    /// Drift field `f(x)`.
    fn drift(&self, x: &[f64], out: &mut [f64]);
    /// Input field `g(x)`.
    fn input_field(&self, x: &[f64], out: &mut [f64]);
    /// Output map `h(x)`.
    fn output(&self, x: &[f64]) -> f64;
    /// Gradient `h'(x)`.
    fn output_gradient(&self, x: &[f64], out: &mut [f64]);

    fn rate(&self, x: &[f64], u: f64, out: &mut [f64]) {
        self.drift(x, out);
        let mut g = vec![0.0; self.dim()];
        self.input_field(x, &mut g);
        for (o, gi) in out.iter_mut().zip(&g) {
            *o += u * gi;
        }
    }
}

/// `(y, y')` at state `x` under input `u`, with `y' = h'(x) (f(x) + g(x) u)`.
pub fn output_and_derivative(pm: &dyn PlantModel, x: &[f64], u: f64) -> (f64, f64) {
    let n = pm.dim();
    let mut rate = vec![0.0; n];
    let mut grad = vec![0.0; n];
    pm.rate(x, u, &mut rate);
    pm.output_gradient(x, &mut grad);
    (pm.output(x), dot(&grad, &rate))
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MassOnCarParams {
    /// Car mass (kg).
    pub m1: f64,
    /// Mass on the ramp (kg).
    pub m2: f64,
    /// Spring coefficient (N/m).
    pub k: f64,
    /// Damper coefficient (N s/m).
    pub d: f64,
    /// Ramp inclination (rad), in `[0, pi/2)`.
    pub theta: f64,
}

impl MassOnCarParams {
    /// `m1 = 4, m2 = 1, k = 2, d = 1, theta = pi/4`.
    pub fn benchmark() -> Self {
        Self {
            m1: 4.0,
            m2: 1.0,
            k: 2.0,
            d: 1.0,
            theta: std::f64::consts::FRAC_PI_4,
        }
    }

    pub fn validate(&self) -> Result<(), PlantError> {
        let mut bad = Vec::new();
        for (name, v) in [("m1", self.m1), ("m2", self.m2), ("k", self.k), ("d", self.d)] {
            if !(v > 0.0 && v.is_finite()) {
                bad.push(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.theta >= 0.0 && self.theta < std::f64::consts::FRAC_PI_2) {
            bad.push(format!("theta must lie in [0, pi/2), got {}", self.theta));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(PlantError::InvalidParams(bad.join("; ")))
        }
    }
}

/// Mass-spring-damper mounted on a ramp of a car.
///
/// State layout is `(z, s, z', s')`: car position, position of the mass along
/// the ramp, and their velocities. The input is the force on the car and the
/// output is the horizontal position of the mass, `z + s cos(theta)`.
#[derive(Debug, Clone)]
pub struct MassOnCar {
    params: MassOnCarParams,
    cos_theta: f64,
    /// Inverse of the (constant) mass matrix.
    inv_mass: [[f64; 2]; 2],
}

impl MassOnCar {
    pub fn new(params: MassOnCarParams) -> Result<Self, PlantError> {
        params.validate()?;
        let MassOnCarParams { m1, m2, theta, .. } = params;
        let c = theta.cos();
        let (a, b, d) = (m1 + m2, m2 * c, m2);
        let det = a * d - b * b;
        if !(det > 0.0) {
            return Err(PlantError::SingularMassMatrix(det));
        }
        Ok(Self {
            params,
            cos_theta: c,
            inv_mass: [[d / det, -b / det], [-b / det, a / det]],
        })
    }

    pub fn params(&self) -> &MassOnCarParams {
        &self.params
    }

    /// Mechanical energy `1/2 q'^T M q' + 1/2 k s^2`; non-increasing when
    /// `u = 0`.
    pub fn energy(&self, x: &[f64]) -> f64 {
        let MassOnCarParams { m1, m2, k, .. } = self.params;
        let (zd, sd) = (x[2], x[3]);
        let kinetic = 0.5 * ((m1 + m2) * zd * zd + 2.0 * m2 * self.cos_theta * zd * sd + m2 * sd * sd);
        kinetic + 0.5 * k * x[1] * x[1]
    }
}

impl PlantModel for MassOnCar {
    fn dim(&self) -> usize {
        4
    }

    fn drift(&self, x: &[f64], out: &mut [f64]) {
        self.rate(x, 0.0, out);
    }

    fn input_field(&self, _x: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
        out[1] = 0.0;
        out[2] = self.inv_mass[0][0];
        out[3] = self.inv_mass[1][0];
    }

    fn output(&self, x: &[f64]) -> f64 {
        x[0] + x[1] * self.cos_theta
    }

    fn output_gradient(&self, _x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&[1.0, self.cos_theta, 0.0, 0.0]);
    }

    #[inline]
    fn rate(&self, x: &[f64], u: f64, out: &mut [f64]) {
        let spring = -(self.params.k * x[1] + self.params.d * x[3]);
        let m = &self.inv_mass;
        out[0] = x[2];
        out[1] = x[3];
        out[2] = m[0][0] * u + m[0][1] * spring;
        out[3] = m[1][0] * u + m[1][1] * spring;
    }
}

type VecField = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
type OutputFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// A plant assembled from closures.
#[derive(Clone)]
pub struct FnPlant {
    name: String,
    dim: usize,
    drift: VecField,
    input_field: VecField,
    output: OutputFn,
    output_gradient: VecField,
}

impl fmt::Debug for FnPlant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnPlant")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .finish()
    }
}

impl FnPlant {
    pub fn new<F, G, H, DH>(name: &str, dim: usize, drift: F, input_field: G, output: H, output_gradient: DH) -> Self
    where
        F: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
        G: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
        H: Fn(&[f64]) -> f64 + Send + Sync + 'static,
        DH: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    {
        Self {
            name: name.to_owned(),
            dim,
            drift: Arc::new(drift),
            input_field: Arc::new(input_field),
            output: Arc::new(output),
            output_gradient: Arc::new(output_gradient),
        }
    }

    /// `x1' = x2, x2' = -x1 + u, y = x1`.
    pub fn harmonic_oscillator() -> Self {
        Self::new(
            "harmonic_oscillator",
            2,
            |x, out| {
                out[0] = x[1];
                out[1] = -x[0];
            },
            |_, out| {
                out[0] = 0.0;
                out[1] = 1.0;
            },
            |x| x[0],
            |_, out| out.copy_from_slice(&[1.0, 0.0]),
        )
    }

    /// `x' = u, y = x`; relative degree one.
    pub fn single_integrator() -> Self {
        Self::new(
            "single_integrator",
            1,
            |_, out| out[0] = 0.0,
            |_, out| out[0] = 1.0,
            |x| x[0],
            |_, out| out[0] = 1.0,
        )
    }
}

impl PlantModel for FnPlant {
    fn dim(&self) -> usize {
        self.dim
    }
    fn drift(&self, x: &[f64], out: &mut [f64]) {
        (self.drift)(x, out)
    }
    fn input_field(&self, x: &[f64], out: &mut [f64]) {
        (self.input_field)(x, out)
    }
    fn output(&self, x: &[f64]) -> f64 {
        (self.output)(x)
    }
    fn output_gradient(&self, x: &[f64], out: &mut [f64]) {
        (self.output_gradient)(x, out)
    }
}

/// Plant registry entry, keyed by name in config files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", content = "params", rename_all = "snake_case")]
pub enum PlantSpec {
    MassOnCar(MassOnCarParams),
}

impl PlantSpec {
    pub fn build(&self) -> Result<Arc<dyn PlantModel>, PlantError> {
        match self {
            PlantSpec::MassOnCar(p) => Ok(Arc::new(MassOnCar::new(*p)?)),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            PlantSpec::MassOnCar(_) => 4,
        }
    }
}

/// Thresholds for the numerical relative-degree test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LieTolerance {
    /// `|L_g h|` must not exceed this.
    pub zero: f64,
    /// `|L_g L_f h|` must be at least `max(gain_floor, zero)`.
    pub gain_floor: f64,
}

impl Default for LieTolerance {
    fn default() -> Self {
        Self {
            zero: 1e-9,
            gain_floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RelativeDegree {
    /// Relative degree two confirmed; carries min and max of `L_g L_f h`.
    ConfirmedTwo {
        min_gain: f64,
        max_gain: f64,
    },
    Failed {
        state: Vec<f64>,
        reason: LieFailure,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LieFailure {
    /// `L_g h != 0`: the input already enters `y'`.
    FirstOrderGainNonzero(f64),
    /// `L_g L_f h` indistinguishable from zero.
    SecondOrderGainVanishes(f64),
}

impl fmt::Display for LieFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::FirstOrderGainNonzero(v) => write!(f, "L_g h != 0 ({v:e})"),
            Self::SecondOrderGainVanishes(v) => write!(f, "L_g L_f h vanishes ({v:e})"),
        }
    }
}

/// `(L_g h)(x)`.
pub fn lie_g_h(pm: &dyn PlantModel, x: &[f64]) -> f64 {
    let n = pm.dim();
    let (mut grad, mut g) = (vec![0.0; n], vec![0.0; n]);
    pm.output_gradient(x, &mut grad);
    pm.input_field(x, &mut g);
    dot(&grad, &g)
}

/// `(L_g L_f h)(x)`, the derivative of `x -> h'(x) f(x)` along `g(x)`.
///
/// Central differences along `g` with one Richardson extrapolation step; the
/// result is exact (up to rounding) when `h'(x) f(x)` is quadratic along `g`.
pub fn lie_g_lf_h(pm: &dyn PlantModel, x: &[f64]) -> f64 {
    let n = pm.dim();
    let mut g = vec![0.0; n];
    pm.input_field(x, &mut g);
    let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let step = 1e-4 / gmax.max(1.0);

    let mut xs = vec![0.0; n];
    let mut grad = vec![0.0; n];
    let mut f = vec![0.0; n];
    let mut lf_h = |offset: f64| {
        for i in 0..n {
            xs[i] = x[i] + offset * g[i];
        }
        pm.output_gradient(&xs, &mut grad);
        pm.drift(&xs, &mut f);
        dot(&grad, &f)
    };
    let mut central = |h: f64| (lf_h(h) - lf_h(-h)) / (2.0 * h);
    let coarse = central(step);
    let fine = central(0.5 * step);
    (4.0 * fine - coarse) / 3.0
}

/// Numerically confirms strict relative degree two at every sample state.
pub fn lie_relative_degree_check(
    pm: &dyn PlantModel,
    samples: &[Vec<f64>],
    tol: LieTolerance,
) -> Result<RelativeDegree, PlantError> {
    if samples.is_empty() {
        return Err(PlantError::InvalidParams("no sample states given".into()));
    }
    let floor = tol.gain_floor.max(tol.zero);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for x in samples {
        let lgh = lie_g_h(pm, x);
        if !(lgh.abs() <= tol.zero) {
            return Ok(RelativeDegree::Failed {
                state: x.clone(),
                reason: LieFailure::FirstOrderGainNonzero(lgh),
            });
        }
        let gain = lie_g_lf_h(pm, x);
        if !(gain.abs() >= floor) {
            return Ok(RelativeDegree::Failed {
                state: x.clone(),
                reason: LieFailure::SecondOrderGainVanishes(gain),
            });
        }
        lo = lo.min(gain);
        hi = hi.max(gain);
    }
    Ok(RelativeDegree::ConfirmedTwo {
        min_gain: lo,
        max_gain: hi,
    })
}

#[derive(Clone)]
pub enum ReferenceSignal {
    /// `t -> cos t`
    Cosine,
    Constant(f64),
    /// Value, first and second derivative.
    Custom(Arc<dyn Fn(f64) -> (f64, f64, f64) + Send + Sync>),
}

impl fmt::Debug for ReferenceSignal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Cosine => f.write_str("Cosine"),
            Self::Constant(c) => write!(f, "Constant({c})"),
            Self::Custom(_) => f.write_str("Custom"),
        }
    }
}

impl ReferenceSignal {
    pub fn cosine() -> Self {
        Self::Cosine
    }

    /// `(y_ref, y_ref', y_ref'')` at `t`.
    #[inline]
    pub fn eval(&self, t: f64) -> (f64, f64, f64) {
        match self {
            Self::Cosine => {
                let (s, c) = t.sin_cos();
                (c, -s, -c)
            }
            Self::Constant(c) => (*c, 0.0, 0.0),
            Self::Custom(f) => f(t),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum ReferenceSpec {
    Cosine,
    Constant { value: f64 },
}

impl From<ReferenceSpec> for ReferenceSignal {
    fn from(spec: ReferenceSpec) -> Self {
        match spec {
            ReferenceSpec::Cosine => ReferenceSignal::Cosine,
            ReferenceSpec::Constant { value } => ReferenceSignal::Constant(value),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_1_SQRT_2;

    fn car() -> MassOnCar {
        MassOnCar::new(MassOnCarParams::benchmark()).unwrap()
    }

    #[test]
    fn mass_on_car_rates() {
        let p = car();
        let mut r = [0.0; 4];
        p.rate(&[0.0; 4], 1.0, &mut r);
        assert_abs_diff_eq!(r[2], 2.0 / 9.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r[3], -(2.0f64.sqrt()) / 9.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r[3], -0.1571348, epsilon = 1e-7);
        assert_eq!(&r[..2], &[0.0, 0.0]);

        p.rate(&[0.0; 4], 0.0, &mut r);
        assert_eq!(r, [0.0; 4]);

        p.rate(&[0.0, 1.0, 0.0, 0.0], 0.0, &mut r);
        assert_abs_diff_eq!(r[2], 0.3142697, epsilon = 1e-7);
        assert_abs_diff_eq!(r[3], -2.2222222, epsilon = 1e-7);
    }

    #[test]
    fn fused_rate_matches_drift_plus_input() {
        let p = car();
        let x = [0.3, -1.2, 2.0, 0.7];
        let (mut fused, mut f, mut g) = ([0.0; 4], [0.0; 4], [0.0; 4]);
        p.rate(&x, 3.5, &mut fused);
        p.drift(&x, &mut f);
        p.input_field(&x, &mut g);
        for i in 0..4 {
            assert_abs_diff_eq!(fused[i], f[i] + 3.5 * g[i], epsilon = 1e-14);
        }
    }

    #[test]
    fn rejects_bad_params() {
        let mut p = MassOnCarParams::benchmark();
        p.theta = std::f64::consts::FRAC_PI_2;
        assert!(MassOnCar::new(p).is_err());
        let mut p = MassOnCarParams::benchmark();
        p.k = 0.0;
        p.d = -1.0;
        match MassOnCar::new(p) {
            Err(PlantError::InvalidParams(msg)) => assert!(msg.contains('k') && msg.contains('d')),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn output_examples() {
        let p = car();
        assert_eq!(output_and_derivative(&p, &[0.0; 4], 7.0), (0.0, 0.0));
        let (y, yd) = output_and_derivative(&p, &[1.0, 1.0, 0.0, 0.0], 0.0);
        assert_abs_diff_eq!(y, 1.0 + FRAC_1_SQRT_2, epsilon = 1e-15);
        assert_abs_diff_eq!(yd, 0.0, epsilon = 1e-15);
        let (y, yd) = output_and_derivative(&p, &[0.0, 0.0, 1.0, 1.0], 5.0);
        assert_eq!(y, 0.0);
        assert_abs_diff_eq!(yd, 1.0 + FRAC_1_SQRT_2, epsilon = 1e-15);
    }

    #[test]
    fn relative_degree_of_mass_on_car() {
        let p = car();
        let samples: Vec<Vec<f64>> = (0..20)
            .map(|i| (0..4).map(|j| ((i * 7 + j * 3) % 21) as f64 - 10.0).collect())
            .collect();
        match lie_relative_degree_check(&p, &samples, LieTolerance::default()).unwrap() {
            RelativeDegree::ConfirmedTwo { min_gain, max_gain } => {
                assert_abs_diff_eq!(min_gain, 1.0 / 9.0, epsilon = 1e-9);
                assert_abs_diff_eq!(max_gain, 1.0 / 9.0, epsilon = 1e-9);
            }
            other => panic!("{other:?}"),
        }
        let loose = LieTolerance {
            zero: 1e3,
            gain_floor: 1e-6,
        };
        assert!(matches!(
            lie_relative_degree_check(&p, &samples, loose).unwrap(),
            RelativeDegree::Failed {
                reason: LieFailure::SecondOrderGainVanishes(_),
                ..
            }
        ));
        assert!(lie_relative_degree_check(&p, &[], LieTolerance::default()).is_err());
    }

    #[test]
    fn single_integrator_has_relative_degree_one() {
        let p = FnPlant::single_integrator();
        match lie_relative_degree_check(&p, &[vec![0.5]], LieTolerance::default()).unwrap() {
            RelativeDegree::Failed { state, reason } => {
                assert_eq!(state, vec![0.5]);
                assert_eq!(reason, LieFailure::FirstOrderGainNonzero(1.0));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn cosine_reference() {
        let r = ReferenceSignal::cosine();
        assert_eq!(r.eval(0.0), (1.0, -0.0, -1.0));
        let (v, d, a) = r.eval(std::f64::consts::FRAC_PI_2);
        assert_abs_diff_eq!(v, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(d, -1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(a, 0.0, epsilon = 1e-15);
        let (v, d, a) = r.eval(7.0);
        assert_abs_diff_eq!(v, 0.7539023, epsilon = 1e-7);
        assert_abs_diff_eq!(d, -0.6569866, epsilon = 1e-7);
        assert_abs_diff_eq!(a, -0.7539023, epsilon = 1e-7);
    }

    #[test]
    fn plant_spec_json() {
        let spec: PlantSpec = serde_json::from_str(
            r#"{"name":"mass_on_car","params":{"m1":4,"m2":1,"k":2,"d":1,"theta":0.7853981633974483}}"#,
        )
        .unwrap();
        assert_eq!(spec, PlantSpec::MassOnCar(MassOnCarParams::benchmark()));
        assert_eq!(spec.build().unwrap().dim(), 4);
        assert!(serde_json::from_str::<PlantSpec>(r#"{"name":"pendulum","params":{}}"#).is_err());
    }

    proptest! {
        #[test]
        fn output_gradient_matches_finite_difference(x in prop::array::uniform4(-10.0f64..10.0)) {
            let p = car();
            let mut grad = [0.0; 4];
            p.output_gradient(&x, &mut grad);
            let h = 1e-6;
            for i in 0..4 {
                let (mut xp, mut xm) = (x, x);
                xp[i] += h;
                xm[i] -= h;
                let fd = (p.output(&xp) - p.output(&xm)) / (2.0 * h);
                prop_assert!((fd - grad[i]).abs() <= 1e-6 * (1.0 + grad[i].abs()));
            }
        }

        #[test]
        fn output_rate_is_input_independent(x in prop::array::uniform4(-10.0f64..10.0)) {
            let p = car();
            let (_, base) = output_and_derivative(&p, &x, 0.0);
            for u in [-30.0, 30.0] {
                let (_, yd) = output_and_derivative(&p, &x, u);
                prop_assert_eq!(yd, base);
            }
        }

        #[test]
        fn cosine_derivative_chain(t in 1e-3f64..20.0) {
            let r = ReferenceSignal::cosine();
            let h = 1e-5;
            let (_, d, a) = r.eval(t);
            let fd1 = (r.eval(t + h).0 - r.eval(t - h).0) / (2.0 * h);
            let fd2 = (r.eval(t + h).1 - r.eval(t - h).1) / (2.0 * h);
            prop_assert!((fd1 - d).abs() < 1e-6);
            prop_assert!((fd2 - a).abs() < 1e-6);
        }
    }
}
