use std::path::PathBuf;

use fmpc::cost::Scheme;
use fmpc::experiment::SchemeSummary;
use fmpc::funnel::{BoundaryFunction, G1Check, Membership, TimeGrid};
use fmpc::plant::{lie_g_h, lie_g_lf_h, output_and_derivative};
use fmpc::{ExperimentConfig, MassOnCar, MassOnCarParams, PlantModel, ReferenceSignal, StageCost, StageCostSpec};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn value_err(e: impl ToString) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_scheme(name: &str) -> PyResult<Scheme> {
    name.parse().map_err(value_err)
}

fn check_state(x: &[f64]) -> PyResult<()> {
    if x.len() == 4 {
        Ok(())
    } else {
        Err(PyValueError::new_err(format!(
            "state must have 4 entries, got {}",
            x.len()
        )))
    }
}

/// Mass-on-car benchmark plant with state `(z, s, z', s')`.
#[pyclass(name = "MassOnCar", frozen)]
struct PyMassOnCar(MassOnCar);

#[pymethods]
impl PyMassOnCar {
    #[new]
    #[pyo3(signature = (m1=4.0, m2=1.0, k=2.0, d=1.0, theta=std::f64::consts::FRAC_PI_4))]
    fn new(m1: f64, m2: f64, k: f64, d: f64, theta: f64) -> PyResult<Self> {
        MassOnCar::new(MassOnCarParams { m1, m2, k, d, theta })
            .map(Self)
            .map_err(value_err)
    }

    fn output(&self, x: Vec<f64>) -> PyResult<f64> {
        check_state(&x)?;
        Ok(self.0.output(&x))
    }

    /// `(y, y')` at state `x` under input `u`.
    #[pyo3(signature = (x, u=0.0))]
    fn output_and_derivative(&self, x: Vec<f64>, u: f64) -> PyResult<(f64, f64)> {
        check_state(&x)?;
        Ok(output_and_derivative(&self.0, &x, u))
    }

    fn rate(&self, x: Vec<f64>, u: f64) -> PyResult<Vec<f64>> {
        check_state(&x)?;
        let mut out = vec![0.0; 4];
        self.0.rate(&x, u, &mut out);
        Ok(out)
    }

    fn lie_g_h(&self, x: Vec<f64>) -> PyResult<f64> {
        check_state(&x)?;
        Ok(lie_g_h(&self.0, &x))
    }

    fn lie_g_lf_h(&self, x: Vec<f64>) -> PyResult<f64> {
        check_state(&x)?;
        Ok(lie_g_lf_h(&self.0, &x))
    }

    fn energy(&self, x: Vec<f64>) -> PyResult<f64> {
        check_state(&x)?;
        Ok(self.0.energy(&x))
    }
}

/// Funnel pair with boundaries `a e^{-bt} + c`.
#[pyclass(name = "FunnelPair", frozen)]
struct PyFunnelPair(fmpc::FunnelPair);

#[pymethods]
impl PyFunnelPair {
    #[new]
    #[pyo3(signature = (psi0=(3.0, 2.0, 0.1), psi1=(6.0, 1.0, 0.1)))]
    fn new(psi0: (f64, f64, f64), psi1: (f64, f64, f64)) -> Self {
        let b = |(a, b, c)| BoundaryFunction::exponential(a, b, c);
        Self(fmpc::FunnelPair::new(b(psi0), b(psi1)))
    }

    fn psi0(&self, t: f64) -> PyResult<(f64, f64)> {
        self.0.psi0.eval(t).map_err(value_err)
    }

    fn psi1(&self, t: f64) -> PyResult<(f64, f64)> {
        self.0.psi1.eval(t).map_err(value_err)
    }

    /// Margins `(psi0 - |e0|, psi1 - |e1|)`, or `None` outside the funnels.
    fn membership(&self, t: f64, e0: f64, e1: f64) -> PyResult<Option<(f64, f64)>> {
        match self.0.in_funnel(t, e0, e1).map_err(value_err)? {
            Membership::Inside(m0, m1) => Ok(Some((m0, m1))),
            Membership::Outside(_) => Ok(None),
        }
    }

    /// Smallest `psi1 + psi0'` on a uniform grid over `[0, t_end]`.
    #[pyo3(signature = (t_end, step=1e-3))]
    fn validate_g1(&self, t_end: f64, step: f64) -> PyResult<f64> {
        let grid = TimeGrid::uniform(0.0, t_end, step).map_err(value_err)?;
        let mut pair = self.0.clone();
        match pair.validate_g1(&grid).map_err(value_err)? {
            G1Check::Ok(eps) => Ok(eps),
            G1Check::Violation(t) => Err(PyValueError::new_err(format!("G1 violated at t = {t}"))),
        }
    }
}

fn funnels_or_default(funnels: Option<&PyFunnelPair>) -> fmpc::FunnelPair {
    funnels.map_or_else(fmpc::FunnelPair::benchmark, |f| f.0.clone())
}

/// Stage cost at output `(zeta0, zeta1)` and input `u` against `cos t`;
/// `inf` outside the funnels.
#[pyfunction]
#[pyo3(signature = (scheme, t, zeta0, zeta1, u, lambda_u=5e-3, funnels=None))]
fn stage_cost(
    scheme: &str,
    t: f64,
    zeta0: f64,
    zeta1: f64,
    u: f64,
    lambda_u: f64,
    funnels: Option<&PyFunnelPair>,
) -> PyResult<f64> {
    let spec = StageCostSpec::new(
        parse_scheme(scheme)?,
        funnels_or_default(funnels),
        lambda_u,
        ReferenceSignal::cosine(),
    );
    spec.validate().map_err(value_err)?;
    Ok(match fmpc::stage_cost(&spec, t, zeta0, zeta1, u) {
        StageCost::Finite(v) => v,
        StageCost::Infinite(..) => f64::INFINITY,
    })
}

/// Funnel margins of the mass-on-car state `x0` at `t0` against `cos t`, or
/// `None` if it is not strictly inside both funnels.
#[pyfunction]
#[pyo3(signature = (x0, t0=0.0, funnels=None))]
fn check_initial_feasibility(x0: Vec<f64>, t0: f64, funnels: Option<&PyFunnelPair>) -> PyResult<Option<(f64, f64)>> {
    check_state(&x0)?;
    let plant = MassOnCar::new(MassOnCarParams::benchmark()).map_err(value_err)?;
    let f = funnels_or_default(funnels);
    match fmpc::check_initial_feasibility(&f, &ReferenceSignal::cosine(), &plant, t0, &x0) {
        Membership::Inside(m0, m1) => Ok(Some((m0, m1))),
        Membership::Outside(_) => Ok(None),
    }
}

/// Experiment configuration.
#[pyclass(name = "ExperimentConfig")]
struct PyConfig(ExperimentConfig);

#[pymethods]
impl PyConfig {
    /// The bundled mass-on-car benchmark config.
    #[staticmethod]
    fn paper_sec5() -> Self {
        Self(ExperimentConfig::paper_sec5())
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        fmpc::parse_config(text).map(Self).map_err(value_err)
    }

    fn to_json(&self) -> String {
        self.0.to_json()
    }

    fn validate(&self) -> Vec<String> {
        self.0.problems()
    }

    #[getter]
    fn horizon(&self) -> f64 {
        self.0.controller.horizon
    }
    #[setter]
    fn set_horizon(&mut self, v: f64) {
        self.0.controller.horizon = v;
    }
    #[getter]
    fn shift(&self) -> f64 {
        self.0.controller.shift
    }
    #[setter]
    fn set_shift(&mut self, v: f64) {
        self.0.controller.shift = v;
    }
    #[getter]
    fn bound(&self) -> f64 {
        self.0.controller.bound
    }
    #[setter]
    fn set_bound(&mut self, v: f64) {
        self.0.controller.bound = v;
    }
    #[getter]
    fn lambda_u(&self) -> f64 {
        self.0.controller.lambda_u
    }
    #[setter]
    fn set_lambda_u(&mut self, v: f64) {
        self.0.controller.lambda_u = v;
    }
    #[getter]
    fn t_end(&self) -> f64 {
        self.0.controller.t_end
    }
    #[setter]
    fn set_t_end(&mut self, v: f64) {
        self.0.controller.t_end = v;
    }
    #[getter]
    fn schemes(&self) -> Vec<&'static str> {
        self.0.schemes.iter().map(|s| s.name()).collect()
    }
    #[setter]
    fn set_schemes(&mut self, names: Vec<String>) -> PyResult<()> {
        self.0.schemes = names.iter().map(|n| parse_scheme(n)).collect::<PyResult<_>>()?;
        Ok(())
    }
    #[getter]
    fn output_dir(&self) -> PathBuf {
        self.0.output.dir.clone()
    }
    #[setter]
    fn set_output_dir(&mut self, dir: PathBuf) {
        self.0.output.dir = dir;
    }

    fn __repr__(&self) -> String {
        let c = &self.0.controller;
        format!(
            "ExperimentConfig(horizon={}, shift={}, bound={}, lambda_u={}, t_end={}, schemes={:?})",
            c.horizon,
            c.shift,
            c.bound,
            c.lambda_u,
            c.t_end,
            self.schemes()
        )
    }
}

#[pyfunction]
fn load_config(path: PathBuf) -> PyResult<PyConfig> {
    fmpc::load_config(path).map(PyConfig).map_err(value_err)
}

fn summary_dict<'py>(py: Python<'py>, s: &SchemeSummary) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("scheme", s.scheme.name())?;
    d.set_item("completed", s.completed)?;
    d.set_item("error", s.error.clone())?;
    d.set_item("steps", s.steps)?;
    d.set_item("max_abs_u", s.max_abs_u)?;
    d.set_item("u_range", (s.u_min, s.u_max))?;
    d.set_item("psi0_violations", s.psi0_violations)?;
    d.set_item("psi1_violations", s.psi1_violations)?;
    d.set_item("min_margins", (s.min_margin0, s.min_margin1))?;
    d.set_item("infeasible_ocp_steps", s.infeasible_ocp_steps)?;
    d.set_item("feasible_throughout", s.feasible_throughout)?;
    d.set_item("audit_violations", s.audit.as_ref().map(|a| a.violations.len()))?;
    d.set_item("wall_time_s", s.wall_time_s)?;
    Ok(d)
}

/// Runs one scheme in memory and returns its summary and sampled signals.
#[pyfunction]
fn run_scheme<'py>(py: Python<'py>, config: &PyConfig, scheme: &str) -> PyResult<Bound<'py, PyDict>> {
    let scheme = parse_scheme(scheme)?;
    let cfg = config.0.clone();
    cfg.validate().map_err(value_err)?;
    let outcome = py
        .detach(|| fmpc::run_scheme(&cfg, scheme))
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    let d = summary_dict(py, &outcome.summary)?;
    let traj = &outcome.run.trajectory;
    let reference = cfg.reference_signal();
    let (r, rd): (Vec<f64>, Vec<f64>) = traj
        .times
        .iter()
        .map(|&t| {
            let (r, rd, _) = reference.eval(t);
            (r, rd)
        })
        .unzip();
    d.set_item("t", traj.times.clone())?;
    d.set_item("y", traj.outputs.clone())?;
    d.set_item("ydot", traj.output_rates.clone())?;
    d.set_item("u", traj.inputs.clone())?;
    d.set_item("e", traj.outputs.iter().zip(&r).map(|(y, r)| y - r).collect::<Vec<_>>())?;
    d.set_item(
        "edot",
        traj.output_rates
            .iter()
            .zip(&rd)
            .map(|(y, r)| y - r)
            .collect::<Vec<_>>(),
    )?;
    Ok(d)
}

/// Runs every configured scheme concurrently, writing artifacts to the
/// config's output directory; returns one summary dict per scheme.
#[pyfunction]
fn run_experiment<'py>(py: Python<'py>, config: &PyConfig) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let cfg = config.0.clone();
    let summary = py.detach(|| fmpc::run_experiment(&cfg)).map_err(|e| match e {
        fmpc::ExperimentError::Config(_) | fmpc::ExperimentError::NothingToRun => value_err(e),
        _ => PyRuntimeError::new_err(e.to_string()),
    })?;
    summary.runs.iter().map(|s| summary_dict(py, s)).collect()
}

/// Audits a run directory; returns `{scheme: [(step, t_hat, reason), ...]}`.
#[pyfunction]
fn audit_run<'py>(py: Python<'py>, dir: PathBuf) -> PyResult<Bound<'py, PyDict>> {
    let reports = py
        .detach(|| fmpc::audit_run_dir(&dir))
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    let d = PyDict::new(py);
    for (scheme, report) in reports {
        let v: Vec<(usize, f64, String)> = report
            .violations
            .into_iter()
            .map(|v| (v.step, v.t_hat, v.reason))
            .collect();
        d.set_item(scheme.name(), v)?;
    }
    Ok(d)
}

#[pymodule]
#[pyo3(name = "fmpc")]
fn fmpc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMassOnCar>()?;
    m.add_class::<PyFunnelPair>()?;
    m.add_class::<PyConfig>()?;
    m.add_function(wrap_pyfunction!(stage_cost, m)?)?;
    m.add_function(wrap_pyfunction!(check_initial_feasibility, m)?)?;
    m.add_function(wrap_pyfunction!(load_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_scheme, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(audit_run, m)?)?;
    m.add("CSV_HEADER", fmpc::CSV_HEADER)?;
    Ok(())
}
