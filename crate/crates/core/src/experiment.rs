//! Experiment configs, run artifacts and the scheme-comparison driver.
//!
//! A run directory holds `config.json`, and per scheme `<scheme>.csv` and
//! `<scheme>_steps.json`, plus a `summary.json` over all schemes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::cost::{stage_cost, Scheme, StageCost};
use crate::error::{ConfigError, ExperimentError, MpcError};
use crate::funnel::{BoundarySpec, FunnelPair, G1Check, Membership, TimeGrid};
use crate::mpc::{
    audit_recursive_feasibility, check_initial_feasibility, run_fmpc, AuditReport, ClosedLoopRun, FmpcConfig,
    StepRecord,
};
use crate::ocp::SolverOptions;
use crate::plant::{PlantModel, PlantSpec, ReferenceSignal, ReferenceSpec};
use crate::sim::AdaptiveOptions;

/// The mass-on-car benchmark config shipped with the crate.
pub const PAPER_SEC5_JSON: &str = include_str!("../configs/paper_sec5.json");

/// Column header of every emitted CSV.
pub const CSV_HEADER: &str = "t,y,y_ref,e,psi0,ydot,yref_dot,edot,psi1,u,stage_cost,feasible_step";

/// Step of the grid on which funnel conditions are checked.
const FUNNEL_GRID_STEP: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunnelSection {
    pub psi0: BoundarySpec,
    pub psi1: BoundarySpec,
}

impl FunnelSection {
    pub fn build(&self) -> FunnelPair {
        FunnelPair::new(self.psi0.into(), self.psi1.into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSection {
    pub horizon: f64,
    pub shift: f64,
    pub bound: f64,
    pub lambda_u: f64,
    pub t0: f64,
    pub x0: Vec<f64>,
    pub t_end: f64,
    #[serde(default = "default_cap")]
    pub cap: f64,
    #[serde(default = "default_violation_weight")]
    pub violation_weight: f64,
}

fn default_cap() -> f64 {
    1e8
}

fn default_violation_weight() -> f64 {
    1e6
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub ocp: SolverOptions,
    /// Closed-loop and audit integrator.
    pub integrator: AdaptiveOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Recorded with the run; the solver itself is deterministic.
    pub seed: u64,
    pub schemes: Vec<Scheme>,
    pub plant: PlantSpec,
    pub funnels: FunnelSection,
    pub reference: ReferenceSpec,
    pub controller: ControllerSection,
    pub solver: SolverSection,
    pub output: OutputSection,
}

impl ExperimentConfig {
    pub fn paper_sec5() -> Self {
        parse_config(PAPER_SEC5_JSON).expect("bundled config is valid")
    }

    pub fn fmpc_config(&self, scheme: Scheme) -> FmpcConfig {
        let c = &self.controller;
        FmpcConfig {
            horizon: c.horizon,
            shift: c.shift,
            bound: c.bound,
            lambda_u: c.lambda_u,
            scheme,
            t0: c.t0,
            x0: c.x0.clone(),
            t_end: c.t_end,
            solver: self.solver.ocp,
            integrator: self.solver.integrator,
            cap: c.cap,
            violation_weight: c.violation_weight,
        }
    }

    pub fn reference_signal(&self) -> ReferenceSignal {
        self.reference.into()
    }

    /// Every invariant breach, each prefixed with its section.
    pub fn problems(&self) -> Vec<String> {
        let mut bad: Vec<String> = self.fmpc_config(Scheme::TwoFunnel).problems();
        for (i, s) in self.schemes.iter().enumerate() {
            if self.schemes[..i].contains(s) {
                bad.push(format!("schemes: {} listed twice", s.name()));
            }
        }
        let plant = match self.plant.build() {
            Ok(p) => Some(p),
            Err(e) => {
                bad.push(format!("plant: {e}"));
                None
            }
        };
        if self.controller.x0.len() != self.plant.dim() {
            bad.push(format!(
                "controller.x0: has length {}, plant state dimension is {}",
                self.controller.x0.len(),
                self.plant.dim()
            ));
        }
        let mut funnels = self.funnels.build();
        let c = &self.controller;
        let funnels_ok = match TimeGrid::uniform(0.0, (c.t_end + c.horizon).max(0.0), FUNNEL_GRID_STEP) {
            Ok(grid) => match funnels.validate_g1(&grid) {
                Ok(G1Check::Ok(_)) => true,
                Ok(G1Check::Violation(t)) => {
                    bad.push(format!("funnels: psi1 + psi0' is not positive at t = {t}"));
                    false
                }
                Err(e) => {
                    bad.push(format!("funnels: {e}"));
                    false
                }
            },
            Err(_) => false,
        };
        if let (Some(p), true) = (plant, funnels_ok) {
            if c.x0.len() == p.dim() && c.t0 >= 0.0 {
                let r = self.reference_signal();
                if let Membership::Outside(i) = check_initial_feasibility(&funnels, &r, p.as_ref(), c.t0, &c.x0) {
                    bad.push(format!("controller.x0: initial error outside funnel psi{i}"));
                }
            }
        }
        bad
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = self.problems();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(bad))
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

fn section<T: DeserializeOwned>(root: &Value, key: &str, bad: &mut Vec<String>) -> Option<T> {
    match root.get(key) {
        None => {
            bad.push(format!("{key}: missing section"));
            None
        }
        Some(v) => match T::deserialize(v) {
            Ok(x) => Some(x),
            Err(e) => {
                bad.push(format!("{key}: {e}"));
                None
            }
        },
    }
}

/// Parses and validates a config document, reporting every problem found.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let root: Value = serde_json::from_str(text)?;
    let Some(obj) = root.as_object() else {
        return Err(ConfigError::Invalid(vec!["config must be a JSON object".into()]));
    };
    const KEYS: [&str; 8] = [
        "seed",
        "schemes",
        "plant",
        "funnels",
        "reference",
        "controller",
        "solver",
        "output",
    ];
    let mut bad: Vec<String> = obj
        .keys()
        .filter(|k| !KEYS.contains(&k.as_str()))
        .map(|k| format!("{k}: unknown section"))
        .collect();
    let seed = section(&root, "seed", &mut bad);
    let schemes = section(&root, "schemes", &mut bad);
    let plant = section(&root, "plant", &mut bad);
    let funnels = section(&root, "funnels", &mut bad);
    let reference = section(&root, "reference", &mut bad);
    let controller = section(&root, "controller", &mut bad);
    let solver = match root.get("solver") {
        None => Some(SolverSection::default()),
        Some(_) => section(&root, "solver", &mut bad),
    };
    let output = section(&root, "output", &mut bad);
    let (
        Some(seed),
        Some(schemes),
        Some(plant),
        Some(funnels),
        Some(reference),
        Some(controller),
        Some(solver),
        Some(output),
    ) = (seed, schemes, plant, funnels, reference, controller, solver, output)
    else {
        return Err(ConfigError::Invalid(bad));
    };
    let cfg = ExperimentConfig {
        seed,
        schemes,
        plant,
        funnels,
        reference,
        controller,
        solver,
        output,
    };
    bad.extend(cfg.problems());
    if bad.is_empty() {
        Ok(cfg)
    } else {
        Err(ConfigError::Invalid(bad))
    }
}

pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig, ConfigError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text)
}

/// Formats `v` with 17 significant digits.
fn num(out: &mut String, v: f64) {
    if v.is_finite() {
        let _ = write!(out, "{v:.16e}");
    } else if v.is_nan() {
        out.push_str("nan");
    } else if v > 0.0 {
        out.push_str("inf");
    } else {
        out.push_str("-inf");
    }
}

/// Index of the MPC step that applied the input recorded at sample time `t`.
fn step_index(run: &ClosedLoopRun, cfg: &FmpcConfig, t: f64) -> Option<usize> {
    if run.steps.is_empty() {
        return None;
    }
    let k = ((t - cfg.t0) / cfg.shift + 1e-9).floor().max(0.0) as usize;
    Some(k.min(run.steps.len() - 1))
}

/// Renders the closed loop as CSV, one row per trajectory sample.
pub fn render_csv(run: &ClosedLoopRun, cfg: &FmpcConfig, funnels: &FunnelPair, reference: &ReferenceSignal) -> String {
    let spec = cfg.stage_cost(funnels.clone(), reference.clone());
    let traj = &run.trajectory;
    let mut out = String::with_capacity(256 * (traj.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for i in 0..traj.len() {
        let t = traj.times[i];
        let (y, yd, u) = (traj.outputs[i], traj.output_rates[i], traj.inputs[i]);
        let (r, rd, _) = reference.eval(t);
        let (p0, p1) = (funnels.psi0.value(t), funnels.psi1.value(t));
        let ell = match stage_cost(&spec, t, y, yd, u) {
            StageCost::Finite(v) => v,
            StageCost::Infinite(..) => f64::INFINITY,
        };
        let feasible = match step_index(run, cfg, t) {
            Some(k) => run.steps[k].feasible && run.steps[k].segment_inside,
            None => funnels.membership(t, y - r, yd - rd).is_inside(),
        };
        for v in [t, y, r, y - r, p0, yd, rd, yd - rd, p1, u, ell] {
            num(&mut out, v);
            out.push(',');
        }
        out.push(if feasible { '1' } else { '0' });
        out.push('\n');
    }
    out
}

pub fn emit_csv(
    run: &ClosedLoopRun,
    cfg: &FmpcConfig,
    funnels: &FunnelPair,
    reference: &ReferenceSignal,
    path: impl AsRef<Path>,
) -> Result<(), ExperimentError> {
    write_file(path.as_ref(), &render_csv(run, cfg, funnels, reference))
}

fn write_file(path: &Path, contents: &str) -> Result<(), ExperimentError> {
    fs::write(path, contents).map_err(|source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_file(path: &Path) -> Result<String, ExperimentError> {
    fs::read_to_string(path).map_err(|source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Per-scheme entry of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeSummary {
    pub scheme: Scheme,
    pub completed: bool,
    pub error: Option<String>,
    pub steps: usize,
    pub samples: usize,
    pub max_abs_u: f64,
    pub u_min: f64,
    pub u_max: f64,
    /// Samples with `|e| >= psi0`.
    pub psi0_violations: usize,
    /// Samples with `|e'| >= psi1`.
    pub psi1_violations: usize,
    pub psi0_respected: bool,
    pub psi1_respected: bool,
    pub min_margin0: f64,
    pub min_margin1: f64,
    pub infeasible_ocp_steps: usize,
    pub feasible_throughout: bool,
    pub audit: Option<AuditReport>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub seed: u64,
    pub runs: Vec<SchemeSummary>,
    /// Two-funnel input range contained in the one-funnel range, with a
    /// strictly smaller peak; present when both schemes ran.
    pub two_funnel_range_smaller: Option<bool>,
}

impl ExperimentSummary {
    pub fn all_completed(&self) -> bool {
        self.runs.iter().all(|r| r.completed)
    }

    pub fn get(&self, scheme: Scheme) -> Option<&SchemeSummary> {
        self.runs.iter().find(|r| r.scheme == scheme)
    }
}

/// A finished (or aborted) scheme run with its summary.
#[derive(Debug, Clone)]
pub struct SchemeOutcome {
    pub run: ClosedLoopRun,
    pub summary: SchemeSummary,
}

fn summarize(
    run: &ClosedLoopRun,
    error: Option<String>,
    plant: &dyn PlantModel,
    funnels: &FunnelPair,
    reference: &ReferenceSignal,
    audit: Option<AuditReport>,
    wall_time_s: f64,
) -> SchemeSummary {
    let (v0, v1) = run.funnel_violations(funnels, plant, reference);
    let (u_min, u_max) = run.input_range();
    let margin = |i: usize| {
        run.steps
            .iter()
            .map(|s| if i == 0 { s.margins.0 } else { s.margins.1 })
            .fold(f64::INFINITY, f64::min)
    };
    SchemeSummary {
        scheme: run.scheme,
        completed: error.is_none(),
        error,
        steps: run.steps.len(),
        samples: run.trajectory.len(),
        max_abs_u: run.max_abs_input(),
        u_min,
        u_max,
        psi0_violations: v0,
        psi1_violations: v1,
        psi0_respected: v0 == 0,
        psi1_respected: v1 == 0,
        min_margin0: margin(0),
        min_margin1: margin(1),
        infeasible_ocp_steps: run.steps.iter().filter(|s| !s.feasible).count(),
        feasible_throughout: run.feasible_throughout,
        audit,
        wall_time_s,
    }
}

/// Runs one scheme and audits the result.
pub fn run_scheme(cfg: &ExperimentConfig, scheme: Scheme) -> Result<SchemeOutcome, ExperimentError> {
    let fc = cfg.fmpc_config(scheme);
    let plant = cfg
        .plant
        .build()
        .map_err(|e| ConfigError::Invalid(vec![format!("plant: {e}")]))?;
    let funnels = cfg.funnels.build();
    let reference = cfg.reference_signal();
    let started = Instant::now();
    let (run, error) = match run_fmpc(&fc, plant.clone(), funnels.clone(), reference.clone()) {
        Ok(run) => (run, None),
        Err(MpcError::Aborted { t_hat, partial, source }) => {
            (*partial, Some(format!("aborted at t = {t_hat}: {source}")))
        }
        Err(e) => return Err(e.into()),
    };
    let audit = error.is_none().then(|| {
        let template = fc.problem(plant.clone(), funnels.clone(), reference.clone());
        audit_recursive_feasibility(&run.steps, &template, &fc.integrator)
    });
    let wall = started.elapsed().as_secs_f64();
    let summary = summarize(&run, error, plant.as_ref(), &funnels, &reference, audit, wall);
    Ok(SchemeOutcome { run, summary })
}

fn compare(runs: &[SchemeSummary]) -> Option<bool> {
    let two = runs.iter().find(|r| r.scheme == Scheme::TwoFunnel && r.completed)?;
    let one = runs.iter().find(|r| r.scheme == Scheme::OneFunnel && r.completed)?;
    Some(two.max_abs_u < one.max_abs_u && one.u_min <= two.u_min && two.u_max <= one.u_max)
}

/// Runs every configured scheme concurrently and writes all artifacts to
/// `cfg.output.dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentSummary, ExperimentError> {
    if cfg.schemes.is_empty() {
        return Err(ExperimentError::NothingToRun);
    }
    cfg.validate()?;
    let dir = &cfg.output.dir;
    fs::create_dir_all(dir).map_err(|source| ExperimentError::Io {
        path: dir.clone(),
        source,
    })?;
    write_file(&dir.join("config.json"), &cfg.to_json())?;

    let funnels = cfg.funnels.build();
    let reference = cfg.reference_signal();
    let runs: Vec<SchemeSummary> = cfg
        .schemes
        .par_iter()
        .map(|&scheme| {
            let outcome = run_scheme(cfg, scheme)?;
            let name = scheme.name();
            emit_csv(
                &outcome.run,
                &cfg.fmpc_config(scheme),
                &funnels,
                &reference,
                dir.join(format!("{name}.csv")),
            )?;
            let steps = serde_json::to_string(&outcome.run.steps).expect("steps serialize");
            write_file(&dir.join(format!("{name}_steps.json")), &steps)?;
            Ok(outcome.summary)
        })
        .collect::<Result<_, ExperimentError>>()?;

    let summary = ExperimentSummary {
        seed: cfg.seed,
        two_funnel_range_smaller: compare(&runs),
        runs,
    };
    write_file(
        &dir.join("summary.json"),
        &serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    Ok(summary)
}

/// Re-audits the stored OCP solutions of every scheme found in `dir`.
pub fn audit_run_dir(dir: impl AsRef<Path>) -> Result<Vec<(Scheme, AuditReport)>, ExperimentError> {
    let dir = dir.as_ref();
    let cfg_path = dir.join("config.json");
    if !cfg_path.is_file() {
        return Err(ExperimentError::MalformedRun(format!(
            "{} not found",
            cfg_path.display()
        )));
    }
    let cfg = parse_config(&read_file(&cfg_path)?)?;
    let plant = cfg
        .plant
        .build()
        .map_err(|e| ConfigError::Invalid(vec![format!("plant: {e}")]))?;
    let mut reports = Vec::new();
    for scheme in [Scheme::TwoFunnel, Scheme::OneFunnel] {
        let path = dir.join(format!("{}_steps.json", scheme.name()));
        if !path.is_file() {
            continue;
        }
        let steps: Vec<StepRecord> = serde_json::from_str(&read_file(&path)?)
            .map_err(|e| ExperimentError::MalformedRun(format!("{}: {e}", path.display())))?;
        let fc = cfg.fmpc_config(scheme);
        let template = fc.problem(Arc::clone(&plant), cfg.funnels.build(), cfg.reference_signal());
        reports.push((scheme, audit_recursive_feasibility(&steps, &template, &fc.integrator)));
    }
    if reports.is_empty() {
        return Err(ExperimentError::MalformedRun(format!(
            "no step logs in {}",
            dir.display()
        )));
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_controller(f: impl FnOnce(&mut Value)) -> String {
        let mut v: Value = serde_json::from_str(PAPER_SEC5_JSON).unwrap();
        f(&mut v["controller"]);
        v.to_string()
    }

    fn invalid(text: &str) -> Vec<String> {
        match parse_config(text) {
            Err(ConfigError::Invalid(v)) => v,
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bundled_config() {
        let c = ExperimentConfig::paper_sec5();
        assert_eq!(c.controller.horizon, 0.6);
        assert_eq!(c.controller.shift, 0.04);
        assert_eq!(c.controller.bound, 30.0);
        assert_eq!(c.controller.lambda_u, 0.005);
        assert_eq!(c.schemes, vec![Scheme::TwoFunnel, Scheme::OneFunnel]);
        assert_eq!(
            c.fmpc_config(Scheme::OneFunnel),
            FmpcConfig::benchmark(Scheme::OneFunnel)
        );
    }

    #[test]
    fn zero_shift() {
        let bad = invalid(&with_controller(|c| c["shift"] = 0.0.into()));
        assert!(bad.iter().any(|m| m.contains("shift must be positive")), "{bad:?}");
    }

    #[test]
    fn fractional_horizon() {
        let bad = invalid(&with_controller(|c| c["horizon"] = 0.5.into()));
        assert!(
            bad.iter().any(|m| m.contains("horizon not a multiple of shift")),
            "{bad:?}"
        );
    }

    #[test]
    fn collects_every_error() {
        let text = with_controller(|c| {
            c["bound"] = (-1.0).into();
            c["lambda_u"] = (-1.0).into();
            c["x0"] = serde_json::json!([0.0, 0.0]);
        });
        assert_eq!(invalid(&text).len(), 3);

        let mut v: Value = serde_json::from_str(PAPER_SEC5_JSON).unwrap();
        v["plant"]["name"] = "pendulum".into();
        v["reference"]["name"] = "sine".into();
        let bad = invalid(&v.to_string());
        assert!(
            bad[0].starts_with("plant:") && bad[1].starts_with("reference:"),
            "{bad:?}"
        );
    }

    #[test]
    fn rejects_infeasible_start() {
        let bad = invalid(&with_controller(|c| c["x0"] = serde_json::json!([5.0, 0.0, 0.0, 0.0])));
        assert!(bad.iter().any(|m| m.contains("psi0")), "{bad:?}");
    }

    #[test]
    fn round_trip() {
        let mut c = ExperimentConfig::paper_sec5();
        c.seed = 12345;
        c.controller.lambda_u = 0.1 + 0.2;
        c.solver.integrator.rtol = 1.0 / 3.0 * 1e-7;
        let back = parse_config(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn zero_length_run_csv() {
        let mut c = ExperimentConfig::paper_sec5();
        c.controller.t_end = 0.0;
        let fc = c.fmpc_config(Scheme::TwoFunnel);
        let plant = c.plant.build().unwrap();
        let run = run_fmpc(&fc, plant, c.funnels.build(), c.reference_signal()).unwrap();
        let csv = render_csv(&run, &fc, &c.funnels.build(), &c.reference_signal());
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], CSV_HEADER);
        let row: Vec<&str> = lines[1].split(',').collect();
        assert_eq!(row.len(), 12);
        assert_eq!(row[0], "0.0000000000000000e0");
        assert_eq!(row[3].parse::<f64>().unwrap(), -1.0);
        assert_eq!(row[11], "1");
    }

    #[test]
    fn seventeen_digits() {
        let mut s = String::new();
        num(&mut s, 0.1);
        assert_eq!(s, "1.0000000000000001e-1");
        assert_eq!(s.parse::<f64>().unwrap(), 0.1);
    }

    #[test]
    fn empty_scheme_list() {
        let mut c = ExperimentConfig::paper_sec5();
        c.schemes.clear();
        assert!(matches!(run_experiment(&c), Err(ExperimentError::NothingToRun)));
        assert_eq!(ExperimentError::NothingToRun.to_string(), "nothing to run");
    }
}
