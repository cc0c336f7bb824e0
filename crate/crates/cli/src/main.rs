//! `conelab`: cone analysis, ellipticity checks, transform planning, solves
//! and invariant suites from the command line.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use conelab_core::cone::{
    is_type2, kappa, kappa_tilde, pue_check, sharpness_sequence, ConeConstants, ConeSpec, DEFAULT_SEED,
    DEFAULT_VARTHETA_BUDGET,
};
use conelab_core::error::Error;
use conelab_core::geometry::{DomainSpec, Hole};
use conelab_core::problem::{derived_constants, ConeConfig, ProblemFile};
use conelab_core::registry::{OperatorConfig, OperatorRegistry, SolverRegistry};
use conelab_core::report::json_bytes;
use conelab_core::solver::{Artifact, SolveOptions};
use conelab_core::solver_fd::{obstruction_experiment, NewtonOptions};
use conelab_core::symfunc::{Operator, SigmaQuotient};
use conelab_core::transform::{fully_uniform_check, ConformalParams, TransformParams, Transformed};
use conelab_core::verify::run_suites;

#[derive(Parser)]
#[command(name = "conelab", version, about = "Conformal curvature equations on cones")]
struct Cli {
    /// Directory for report.json and artifacts; the report also goes to stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for every sampled quantity.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true, env = "CONELAB_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cone constants.
    Cone {
        #[command(subcommand)]
        action: ConeAction,
    },
    /// Sampled partial and full uniform ellipticity.
    Ellipticity(EllipticityArgs),
    /// Transform constants for given (α, τ).
    Transform {
        #[command(subcommand)]
        action: TransformAction,
    },
    /// Solve a problem file with a registered backend.
    Solve(SolveArgs),
    /// Invariant suites of all modules.
    Verify {
        /// Smaller samples, no 3D convergence study.
        #[arg(long)]
        fast: bool,
    },
    /// Exploratory Γ₁ versus Γ₃ family on a ball with two holes.
    Obstruction {
        #[arg(long, default_value_t = 33)]
        points: usize,
        #[arg(long = "K", default_value_t = 10)]
        levels: u32,
    },
}

#[derive(Subcommand)]
enum ConeAction {
    Analyze(ConeArgs),
}

#[derive(Args)]
struct ConeArgs {
    /// `garding`, `positive` or `p-cone`.
    #[arg(long)]
    kind: String,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    k: Option<usize>,
    /// Random starts for the ϑ search.
    #[arg(long, default_value_t = DEFAULT_VARTHETA_BUDGET)]
    budget: usize,
}

#[derive(Args)]
struct EllipticityArgs {
    /// Operator kind from the registry.
    #[arg(long, default_value = "sigma")]
    operator: String,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    k: usize,
    #[arg(long)]
    l: Option<usize>,
    /// Take the `1/(k−l)` root.
    #[arg(long)]
    root: bool,
    /// Also check the transformed operator with this ρ.
    #[arg(long, allow_hyphen_values = true)]
    rho: Option<f64>,
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
}

#[derive(Subcommand)]
enum TransformAction {
    Plan(PlanArgs),
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long, allow_hyphen_values = true)]
    alpha: f64,
    #[arg(long, allow_hyphen_values = true)]
    tau: f64,
    #[arg(long)]
    n: usize,
    /// `garding:K`, `positive` or `p-cone:K`.
    #[arg(long)]
    cone: String,
    #[arg(long, default_value_t = 1.0)]
    varsigma: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Backend {
    Radial,
    Fd,
}

#[derive(Args)]
struct SolveArgs {
    #[arg(value_enum)]
    backend: Backend,
    #[arg(long)]
    problem: PathBuf,
    /// Levels of the infinite-boundary family.
    #[arg(long = "K")]
    levels: Option<u32>,
    /// Radial nodes or points per axis.
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
}

/// A finished command: report, artifacts and whether every check passed.
struct Run {
    report: Value,
    artifacts: Vec<Artifact>,
    ok: bool,
}

impl Run {
    fn ok(report: Value) -> Self {
        Self {
            report,
            artifacts: Vec::new(),
            ok: true,
        }
    }
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if !e.is_input_error() => 1,
            _ => 2,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("conelab: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli).and_then(|r| emit(&cli, r)) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("conelab: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn emit(cli: &Cli, run: Run) -> Result<bool, CliError> {
    let mut report = run.report;
    report["version"] = json!(env!("CARGO_PKG_VERSION"));
    report["artifacts"] = Value::Array(run.artifacts.iter().map(|a| json!(a.name)).collect());
    report["passed"] = json!(run.ok);
    let bytes = json_bytes(&report);
    if let Some(dir) = &cli.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), &bytes)?;
        for a in &run.artifacts {
            fs::write(dir.join(&a.name), &a.bytes)?;
        }
    }
    print!("{}", String::from_utf8_lossy(&bytes));
    Ok(run.ok)
}

fn run(cli: &Cli) -> Result<Run, CliError> {
    let seed = cli.seed.unwrap_or(DEFAULT_SEED);
    match &cli.command {
        Command::Cone {
            action: ConeAction::Analyze(a),
        } => cone_analyze(a, seed),
        Command::Ellipticity(a) => ellipticity(a, seed),
        Command::Transform {
            action: TransformAction::Plan(a),
        } => transform_plan(a, seed),
        Command::Solve(a) => solve(a, cli.seed),
        Command::Verify { fast } => {
            let rep = run_suites(seed, *fast);
            let ok = rep.passed;
            Ok(Run {
                report: json!({"command": "verify", "verify": rep}),
                artifacts: Vec::new(),
                ok,
            })
        }
        Command::Obstruction { points, levels } => obstruction(*points, *levels),
    }
}

fn cone_spec(kind: &str, k: Option<usize>, n: usize) -> Result<ConeSpec, CliError> {
    Ok(ConeConfig { kind: kind.into(), k }.build(n)?)
}

fn cone_analyze(a: &ConeArgs, seed: u64) -> Result<Run, CliError> {
    let cone = cone_spec(&a.kind, a.k, a.n)?;
    let constants = ConeConstants::compute(&cone, a.budget, seed)?;
    Ok(Run::ok(json!({
        "command": "cone analyze",
        "inputs": {"kind": a.kind, "n": a.n, "k": a.k, "budget": a.budget, "seed": seed},
        "cone": cone.label(),
        "kappa": kappa(&cone)?,
        "kappa_tilde": kappa_tilde(&cone, 2000, seed)?,
        "is_type2": is_type2(&cone),
        "vartheta": constants.vartheta,
    })))
}

fn ellipticity(a: &EllipticityArgs, seed: u64) -> Result<Run, CliError> {
    let cfg = OperatorConfig {
        kind: a.operator.clone(),
        k: Some(a.k),
        l: a.l,
        root: a.root,
        normalized: true,
        ..OperatorConfig::default()
    };
    let op = OperatorRegistry::default().build(&cfg, a.n)?;
    let cone = op.cone();
    let constants = ConeConstants::compute(&cone, DEFAULT_VARTHETA_BUDGET, seed)?;
    let m = constants.kappa + 1;
    let pue = pue_check(op.as_ref(), &cone, m, a.samples, seed)?;
    let mut report = json!({
        "command": "ellipticity",
        "inputs": {"operator": cfg, "n": a.n, "rho": a.rho, "samples": a.samples, "seed": seed},
        "cone": cone.label(),
        "kappa": constants.kappa,
        "partial": pue,
    });
    if m < a.n {
        let seq = sharpness_sequence(op.as_ref(), m, &[1e-2, 1e-4, 1e-6, 1e-8])?;
        report["sharpness"] = json!({"index": m + 1, "sequence": seq});
    }
    let mut ok = true;
    if let Some(rho) = a.rho {
        let params = TransformParams::new(a.n, rho, &constants)?;
        let t = Transformed::new(op, params)?;
        let full = fully_uniform_check(&t, &constants, a.samples, seed)?;
        ok = full.passed;
        report["fully_uniform"] = serde_json::to_value(&full).map_err(|e| CliError::Input(e.to_string()))?;
    }
    Ok(Run {
        report,
        artifacts: Vec::new(),
        ok,
    })
}

fn parse_cone(text: &str, n: usize) -> Result<ConeSpec, CliError> {
    let (kind, k) = match text.split_once(':') {
        Some((kind, k)) => (
            kind,
            Some(
                k.parse::<usize>()
                    .map_err(|_| CliError::Input(format!("bad cone order in `{text}`")))?,
            ),
        ),
        None => (text, None),
    };
    cone_spec(kind, k, n)
}

fn transform_plan(a: &PlanArgs, seed: u64) -> Result<Run, CliError> {
    let cone = parse_cone(&a.cone, a.n)?;
    let constants = ConeConstants::compute(&cone, DEFAULT_VARTHETA_BUDGET, seed)?;
    let params = ConformalParams::new(a.alpha, a.tau, a.n, &constants, a.varsigma)?;
    Ok(Run::ok(json!({
        "command": "transform plan",
        "inputs": {"alpha": a.alpha, "tau": a.tau, "n": a.n, "cone": a.cone, "varsigma": a.varsigma, "seed": seed},
        "derived": derived_constants(&cone, &constants, &params),
    })))
}

fn read_problem(path: &Path) -> Result<ProblemFile, CliError> {
    let text =
        fs::read_to_string(path).map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
    Ok(ProblemFile::from_json(&text)?)
}

fn solve(a: &SolveArgs, seed: Option<u64>) -> Result<Run, CliError> {
    let file = read_problem(&a.problem)?;
    let name = match a.backend {
        Backend::Radial => "radial",
        Backend::Fd => "fd",
    };
    let options = SolveOptions {
        levels: a.levels,
        grid: a.grid,
        tol: a.tol,
        seed,
    };
    let outcome = SolverRegistry::default().get(name)?.solve(&file, &options)?;
    let mut report = outcome.report;
    report["command"] = json!(format!("solve {name}"));
    Ok(Run {
        report,
        artifacts: outcome.artifacts,
        ok: true,
    })
}

fn obstruction(points: usize, levels: u32) -> Result<Run, CliError> {
    let domain = DomainSpec::BallMinusBalls {
        radius: 1.0,
        holes: [-0.45, 0.45]
            .iter()
            .map(|&x| Hole {
                center: vec![x, 0.0, 0.0],
                radius: 0.25,
            })
            .collect(),
    };
    let arms: Vec<(String, Arc<dyn Operator>)> = vec![
        ("sigma_1".into(), Arc::new(SigmaQuotient::sigma(3, 1)?)),
        ("sigma_3 root".into(), Arc::new(SigmaQuotient::sigma_root(3, 3)?)),
    ];
    let rep = obstruction_experiment(&domain, &arms, points, levels, &NewtonOptions::default())?;
    Ok(Run::ok(json!({
        "command": "obstruction",
        "inputs": {"points": points, "K": levels},
        "obstruction": rep,
    })))
}
