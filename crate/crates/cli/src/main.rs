use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use fmpc::cost::Scheme;
use fmpc::funnel::{G0Check, G1Check, Membership, TimeGrid};
use fmpc::plant::{lie_relative_degree_check, LieTolerance, RelativeDegree};
use fmpc::{
    audit_run_dir, check_initial_feasibility, load_config, run_experiment, ConfigError, ExperimentConfig,
    ExperimentError,
};

const EXIT_INVALID: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

/// Funnel MPC experiment runner.
#[derive(Parser)]
#[command(name = "fmpc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the closed loop for each configured scheme and write CSV, step
    /// logs and a summary.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides `output.dir`).
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, value_enum)]
        scheme: Option<SchemeArg>,
        #[arg(long)]
        t_end: Option<f64>,
        #[arg(long)]
        horizon: Option<f64>,
        #[arg(long)]
        shift: Option<f64>,
        #[arg(long)]
        bound: Option<f64>,
    },
    /// Check a config: funnel conditions, initial feasibility and relative degree.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Re-check every stored OCP solution of a run directory.
    Audit {
        #[arg(long)]
        run: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum SchemeArg {
    TwoFunnel,
    OneFunnel,
    Both,
}

impl SchemeArg {
    fn schemes(self) -> Vec<Scheme> {
        match self {
            SchemeArg::TwoFunnel => vec![Scheme::TwoFunnel],
            SchemeArg::OneFunnel => vec![Scheme::OneFunnel],
            SchemeArg::Both => vec![Scheme::TwoFunnel, Scheme::OneFunnel],
        }
    }
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn invalid(message: impl ToString) -> Self {
        Self {
            code: EXIT_INVALID,
            message: message.to_string(),
        }
    }

    fn runtime(message: impl ToString) -> Self {
        Self {
            code: EXIT_RUNTIME,
            message: message.to_string(),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => Failure::runtime(e),
            _ => Failure::invalid(e),
        }
    }
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Config(c) => c.into(),
            ExperimentError::NothingToRun => Failure::invalid(e),
            _ => Failure::runtime(e),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_INVALID)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Run {
            config,
            output,
            scheme,
            t_end,
            horizon,
            shift,
            bound,
        } => load_config(&config).map_err(Failure::from).and_then(|mut cfg| {
            if let Some(dir) = output {
                cfg.output.dir = dir;
            }
            if let Some(s) = scheme {
                cfg.schemes = s.schemes();
            }
            let c = &mut cfg.controller;
            c.t_end = t_end.unwrap_or(c.t_end);
            c.horizon = horizon.unwrap_or(c.horizon);
            c.shift = shift.unwrap_or(c.shift);
            c.bound = bound.unwrap_or(c.bound);
            run(&cfg)
        }),
        Command::Validate { config } => validate(&config),
        Command::Audit { run } => audit(&run),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cfg: &ExperimentConfig) -> Result<(), Failure> {
    let summary = run_experiment(cfg)?;
    println!("output: {}", cfg.output.dir.display());
    for r in &summary.runs {
        println!(
            "{:>10}: steps {:>4}  max|u| {:>9.4}  u in [{:.4}, {:.4}]  psi0 {}  psi1 {}  audit {}",
            r.scheme.name(),
            r.steps,
            r.max_abs_u,
            r.u_min,
            r.u_max,
            respected(r.psi0_violations),
            respected(r.psi1_violations),
            r.audit
                .as_ref()
                .map_or("skipped".to_string(), |a| format!("{} violations", a.violations.len())),
        );
        if let Some(e) = &r.error {
            println!("{:>10}  {e}", "");
        }
    }
    if let Some(smaller) = summary.two_funnel_range_smaller {
        println!("two_funnel input range smaller: {smaller}");
    }
    if summary.all_completed() {
        Ok(())
    } else {
        Err(Failure::runtime("not every run completed"))
    }
}

fn respected(violations: usize) -> String {
    if violations == 0 {
        "respected".into()
    } else {
        format!("violated at {violations} samples")
    }
}

fn validate(path: &Path) -> Result<(), Failure> {
    let cfg = load_config(path)?;
    let c = &cfg.controller;
    let grid = TimeGrid::uniform(0.0, c.t_end + c.horizon, 1e-3).map_err(Failure::invalid)?;
    let mut funnels = cfg.funnels.build();
    for (name, b) in [("psi0", &funnels.psi0), ("psi1", &funnels.psi1)] {
        match b.validate_g0(&grid).map_err(Failure::invalid)? {
            G0Check::Ok(inf) => println!("G0 {name}: ok, inf = {inf}"),
            G0Check::Violation(t) => return Err(Failure::invalid(format!("G0 {name}: violated at t = {t}"))),
        }
    }
    match funnels.validate_g1(&grid).map_err(Failure::invalid)? {
        G1Check::Ok(eps) => println!("G1: ok, eps = {eps}"),
        G1Check::Violation(t) => return Err(Failure::invalid(format!("G1: violated at t = {t}"))),
    }

    let plant = cfg.plant.build().map_err(Failure::invalid)?;
    match check_initial_feasibility(&funnels, &cfg.reference_signal(), plant.as_ref(), c.t0, &c.x0) {
        Membership::Inside(m0, m1) => println!("initial feasibility: ok, margins ({m0}, {m1})"),
        Membership::Outside(i) => return Err(Failure::invalid(format!("initial error outside psi{i}"))),
    }

    // x0 and the corners of the unit box around it.
    let n = c.x0.len();
    let samples: Vec<Vec<f64>> = std::iter::once(c.x0.clone())
        .chain((0..1usize << n).map(|mask| {
            c.x0.iter()
                .enumerate()
                .map(|(i, v)| v + if mask >> i & 1 == 1 { 1.0 } else { -1.0 })
                .collect()
        }))
        .collect();
    match lie_relative_degree_check(plant.as_ref(), &samples, LieTolerance::default()).map_err(Failure::invalid)? {
        RelativeDegree::ConfirmedTwo { min_gain, max_gain } => {
            println!(
                "relative degree: 2 at {} states, L_g L_f h in [{min_gain}, {max_gain}]",
                samples.len()
            )
        }
        RelativeDegree::Failed { state, reason } => {
            return Err(Failure::invalid(format!(
                "relative degree check failed at {state:?}: {reason}"
            )))
        }
    }
    println!("config ok");
    Ok(())
}

fn audit(dir: &Path) -> Result<(), Failure> {
    let reports = audit_run_dir(dir)?;
    let mut dirty = 0;
    for (scheme, report) in &reports {
        println!(
            "{}: {} steps checked, {} violations",
            scheme.name(),
            report.steps_checked,
            report.violations.len()
        );
        for v in &report.violations {
            println!("  step {} (t = {}): {}", v.step, v.t_hat, v.reason);
        }
        dirty += usize::from(!report.is_clean());
    }
    if dirty == 0 {
        Ok(())
    } else {
        Err(Failure::invalid(format!("{dirty} run(s) failed the audit")))
    }
}
