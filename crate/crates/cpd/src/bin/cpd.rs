//! Command-line front end: single trajectories, convergence sweeps,
//! long-horizon conservation studies, and resonance diagnostics.
//!
//! Exit codes: 0 on success, 1 on runtime failure (I/O, strict-mode
//! non-convergence), 2 on usage errors.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cpd::filters::{check_resonance, ResonanceKind};
use cpd::harness::{
    conservation_run, convergence_sweep, emit_drift_csv, emit_sweep_csv, emit_trajectory_csv,
    single_run, Coupling, Method, SweepSpec,
};

#[derive(Parser)]
#[command(name = "cpd", version, about = "Charged-particle dynamics with a filtered variational integrator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate a single trajectory and write trajectory CSV
    Run(CommonArgs),
    /// Sweep step sizes (or coupled epsilon grids) against the reference solver
    Converge(CommonArgs),
    /// Long-horizon conservation run; writes invariant drift summaries
    Conserve(CommonArgs),
    /// Check the non-resonance condition for a (h, eps) pair
    Check(CheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Fvi,
    Boris,
    Reference,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Method {
        match m {
            MethodArg::Fvi => Method::Fvi,
            MethodArg::Boris => Method::Boris,
            MethodArg::Reference => Method::Reference,
        }
    }
}

#[derive(Clone, Copy, ValueEnum, PartialEq)]
enum Profile {
    /// CI-friendly horizons and grids
    Desk,
    /// The long horizons and extended epsilon grids of the original studies
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum CouplingArg {
    /// Cartesian product of the h and eps grids
    Independent,
    /// h = alpha * eps
    Eps,
    /// h = alpha * sqrt(eps)
    SqrtEps,
}

#[derive(Args)]
struct CommonArgs {
    /// Problem label: p1 | p2 | p3 | p4
    #[arg(long)]
    problem: Option<String>,
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    /// Step size; when omitted, converge uses the built-in grid
    #[arg(long)]
    h: Option<f64>,
    /// Field-strength parameter (ignored for p1/p2, which fix eps = 1)
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long = "t-end")]
    t_end: Option<f64>,
    /// Output CSV path (required for data-producing subcommands)
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    profile: Option<Profile>,
    /// Treat fixed-point non-convergence as a hard failure
    #[arg(long)]
    strict: bool,
    /// Worker threads for sweep cells; 0 = automatic
    #[arg(long)]
    parallelism: Option<usize>,
    /// Record every N-th step
    #[arg(long)]
    stride: Option<u64>,
    /// Grid coupling for converge sweeps
    #[arg(long, value_enum)]
    coupling: Option<CouplingArg>,
    /// Coupling factor alpha
    #[arg(long)]
    alpha: Option<f64>,
    /// Plain-text key=value defaults file; flags override
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long)]
    h: f64,
    #[arg(long)]
    eps: f64,
}

/// Flag values after merging the optional config file underneath the
/// command line.
struct Resolved {
    problem: String,
    method: Method,
    h: Option<f64>,
    eps: Option<f64>,
    t_end: Option<f64>,
    out: Option<PathBuf>,
    profile: Profile,
    strict: bool,
    parallelism: usize,
    stride: u64,
    coupling: Option<CouplingArg>,
    alpha: Option<f64>,
}

fn usage_error(msg: &str) -> ExitCode {
    eprintln!("usage error: {msg}");
    eprintln!("run `cpd --help` for flag descriptions");
    ExitCode::from(2)
}

fn runtime_error(msg: &str) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(1)
}

fn parse_config(path: &PathBuf) -> Result<HashMap<String, String>, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("reading {}: {e}", path.display()))?;
    let mut map = HashMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("{}:{}: expected key=value", path.display(), lineno + 1))?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

fn resolve(args: &CommonArgs) -> Result<Resolved, String> {
    let cfg = match &args.config {
        Some(path) => parse_config(path)?,
        None => HashMap::new(),
    };
    let get = |key: &str| cfg.get(key).cloned();
    let num = |key: &str| -> Result<Option<f64>, String> {
        get(key)
            .map(|v| v.parse::<f64>().map_err(|_| format!("config key {key}: not a number: {v}")))
            .transpose()
    };

    let problem = args
        .problem
        .clone()
        .or_else(|| get("problem"))
        .unwrap_or_else(|| "p1".to_string());
    let method = match args.method {
        Some(m) => m.into(),
        None => match get("method") {
            Some(v) => Method::parse(&v).ok_or_else(|| format!("config key method: unknown method {v}"))?,
            None => Method::Fvi,
        },
    };
    let profile = match args.profile {
        Some(p) => p,
        None => match get("profile").as_deref() {
            Some("full") => Profile::Full,
            Some("desk") | None => Profile::Desk,
            Some(v) => return Err(format!("config key profile: expected desk|full, got {v}")),
        },
    };
    let strict = args.strict || get("strict").as_deref() == Some("true");
    let coupling = match args.coupling {
        Some(c) => Some(c),
        None => match get("coupling").as_deref() {
            Some("independent") => Some(CouplingArg::Independent),
            Some("eps") => Some(CouplingArg::Eps),
            Some("sqrt-eps") => Some(CouplingArg::SqrtEps),
            Some(v) => return Err(format!("config key coupling: unknown coupling {v}")),
            None => None,
        },
    };
    Ok(Resolved {
        problem,
        method,
        h: args.h.or(num("h")?),
        eps: args.eps.or(num("eps")?),
        t_end: args.t_end.or(num("t-end")?),
        out: args.out.clone().or_else(|| get("out").map(PathBuf::from)),
        profile,
        strict,
        parallelism: match args.parallelism {
            Some(p) => p,
            None => num("parallelism")?.map(|v| v as usize).unwrap_or(0),
        },
        stride: match args.stride {
            Some(s) => s.max(1),
            None => num("stride")?.map(|v| (v as u64).max(1)).unwrap_or(1),
        },
        coupling,
        alpha: args.alpha.or(num("alpha")?),
    })
}

fn check_positive(name: &str, v: f64) -> Result<(), String> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(format!("--{name} must be positive, got {v}"))
    }
}

/// Default epsilon: 1 for the moderate-field problems, 1e-4 for the
/// strong-field ones.
fn default_eps(problem: &str) -> f64 {
    match problem {
        "p3" | "p4" => 1e-4,
        _ => 1.0,
    }
}

fn cmd_run(r: &Resolved) -> Result<String, CmdError> {
    let out = r.out.as_ref().ok_or_else(|| CmdError::usage("--out is required for run"))?;
    let h = r.h.ok_or_else(|| CmdError::usage("--h is required for run"))?;
    check_positive("h", h).map_err(CmdError::Usage)?;
    let eps = r.eps.unwrap_or_else(|| default_eps(&r.problem));
    let t_end = r.t_end.unwrap_or(1.0);
    check_positive("t-end", t_end).map_err(CmdError::Usage)?;
    warn_resonance(h, eps);
    let (cell, points) = single_run(&r.problem, r.method, h, eps, t_end, r.stride, r.strict)
        .map_err(|e| CmdError::Runtime(e.to_string()))?;
    emit_trajectory_csv(&points, out).map_err(|e| CmdError::Runtime(e.to_string()))?;
    let d = cell.drift.as_ref().expect("single run records drifts");
    Ok(format!(
        "run problem={} method={} h={} eps={} t_end={} samples={} max_eH={:.3e} max_eM={} max_eI={:.3e} warnings={}",
        r.problem,
        r.method,
        h,
        eps,
        t_end,
        points.len(),
        d.energy.max,
        d.momentum.map(|m| format!("{:.3e}", m.max)).unwrap_or_else(|| "n/a".into()),
        d.magnetic_moment.max,
        cell.non_converged_steps,
    ))
}

fn cmd_converge(r: &Resolved) -> Result<String, CmdError> {
    let out = r.out.as_ref().ok_or_else(|| CmdError::usage("--out is required for converge"))?;
    let strong = matches!(r.problem.as_str(), "p3" | "p4");
    let mut spec = SweepSpec::new(&r.problem, r.method, r.t_end.unwrap_or(if strong { PI / 2.0 } else { 1.0 }));
    spec.parallelism = r.parallelism;

    // an explicit --h pins the step size, so default to uncoupled grids then
    let coupled_default = strong && r.h.is_none();
    let coupling = match (r.coupling, coupled_default) {
        (Some(CouplingArg::Independent), _) | (None, false) => Coupling::Independent,
        (Some(CouplingArg::Eps), _) | (None, true) => {
            Coupling::HProportionalEps(r.alpha.unwrap_or(2.0))
        }
        (Some(CouplingArg::SqrtEps), _) => Coupling::HProportionalSqrtEps(r.alpha.unwrap_or(1.0)),
    };
    spec.coupling = coupling;
    match coupling {
        Coupling::Independent => {
            spec.h_grid = match r.h {
                Some(h) => {
                    check_positive("h", h).map_err(CmdError::Usage)?;
                    vec![h]
                }
                // the standard dyadic grid h = 1/2^k, k = 1..8
                None => (1..=8).map(|k| 0.5f64.powi(k)).collect(),
            };
            spec.eps_grid = vec![r.eps.unwrap_or_else(|| default_eps(&r.problem))];
        }
        _ => {
            spec.eps_grid = match r.eps {
                Some(e) => {
                    check_positive("eps", e).map_err(CmdError::Usage)?;
                    vec![e]
                }
                None => {
                    let kmax = if r.profile == Profile::Full { 13 } else { 11 };
                    (6..=kmax).map(|k| PI / 2f64.powi(k)).collect()
                }
            };
        }
    }

    let result = convergence_sweep(&spec).map_err(|e| CmdError::Runtime(e.to_string()))?;
    emit_sweep_csv(&result, out).map_err(|e| CmdError::Runtime(e.to_string()))?;
    let warnings: u64 = result.cells.iter().map(|c| c.non_converged_steps).sum();
    if r.strict && warnings > 0 {
        return Err(CmdError::Runtime(format!(
            "{warnings} non-converged fixed-point steps in strict mode"
        )));
    }
    let summary = match coupling {
        Coupling::Independent => {
            let orders: Vec<String> = result
                .cells
                .iter()
                .filter_map(|c| c.order_x)
                .map(|p| format!("{p:.2}"))
                .collect();
            format!("orders_x=[{}]", orders.join(","))
        }
        _ => {
            let slope = result.slope_finest_half(|c| c.error.map(|e| e.error_x));
            format!(
                "slope_x={}",
                slope.map(|s| format!("{s:.2}")).unwrap_or_else(|| "n/a".into())
            )
        }
    };
    Ok(format!(
        "converge problem={} method={} cells={} {} warnings={}",
        r.problem,
        r.method,
        result.cells.len(),
        summary,
        warnings,
    ))
}

fn cmd_conserve(r: &Resolved) -> Result<String, CmdError> {
    let out = r.out.as_ref().ok_or_else(|| CmdError::usage("--out is required for conserve"))?;
    let h = r.h.unwrap_or(0.01);
    check_positive("h", h).map_err(CmdError::Usage)?;
    let eps = r.eps.unwrap_or_else(|| default_eps(&r.problem));
    let t_end = r.t_end.unwrap_or(if r.profile == Profile::Full { 10000.0 } else { 1000.0 });
    check_positive("t-end", t_end).map_err(CmdError::Usage)?;
    warn_resonance(h, eps);
    let mut spec = SweepSpec::new(&r.problem, r.method, t_end);
    spec.h_grid = vec![h];
    spec.eps_grid = vec![eps];
    spec.sample_stride = r.stride;
    spec.parallelism = r.parallelism;
    let result = conservation_run(&spec).map_err(|e| CmdError::Runtime(e.to_string()))?;
    emit_drift_csv(&result, out).map_err(|e| CmdError::Runtime(e.to_string()))?;
    let cell = &result.cells[0];
    if let Some(note) = &cell.note {
        return Err(CmdError::Runtime(note.clone()));
    }
    let warnings = cell.non_converged_steps;
    if r.strict && warnings > 0 {
        return Err(CmdError::Runtime(format!(
            "{warnings} non-converged fixed-point steps in strict mode"
        )));
    }
    let d = cell.drift.as_ref().expect("conservation cell records drifts");
    Ok(format!(
        "conserve problem={} method={} h={} eps={} t_end={} max_eH={:.3e} max_eM={} max_eI={:.3e} warnings={}",
        r.problem,
        r.method,
        h,
        eps,
        t_end,
        d.energy.max,
        d.momentum.map(|m| format!("{:.3e}", m.max)).unwrap_or_else(|| "n/a".into()),
        d.magnetic_moment.max,
        warnings,
    ))
}

fn warn_resonance(h: f64, eps: f64) {
    for v in check_resonance(h, eps, 5, 0.1) {
        let func = match v.kind {
            ResonanceKind::Sin => "sin",
            ResonanceKind::Cos => "cos",
        };
        eprintln!(
            "warning: near-resonant step size: |{}({} h/2eps)| = {:.3e} < 0.1",
            func, v.k, v.value
        );
    }
}

fn cmd_check(args: &CheckArgs) -> Result<String, CmdError> {
    check_positive("h", args.h).map_err(CmdError::Usage)?;
    check_positive("eps", args.eps).map_err(CmdError::Usage)?;
    let violations = check_resonance(args.h, args.eps, 5, 0.1);
    if violations.is_empty() {
        return Ok(format!(
            "check h={} eps={}: non-resonance condition holds for k=1..5 at margin 0.1",
            args.h, args.eps
        ));
    }
    for v in &violations {
        let func = match v.kind {
            ResonanceKind::Sin => "sin",
            ResonanceKind::Cos => "cos",
        };
        println!(
            "violation: |{}({} * h/2eps)| = {:.6e} < 0.1",
            func, v.k, v.value
        );
    }
    Ok(format!(
        "check h={} eps={}: {} violation(s)",
        args.h,
        args.eps,
        violations.len()
    ))
}

enum CmdError {
    Usage(String),
    Runtime(String),
}

impl CmdError {
    fn usage(msg: &str) -> Self {
        CmdError::Usage(msg.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Check(args) => cmd_check(args),
        Command::Run(args) | Command::Converge(args) | Command::Conserve(args) => {
            match resolve(args) {
                Err(e) => return usage_error(&e),
                Ok(r) => match &cli.command {
                    Command::Run(_) => cmd_run(&r),
                    Command::Converge(_) => cmd_converge(&r),
                    Command::Conserve(_) => cmd_conserve(&r),
                    Command::Check(_) => unreachable!(),
                },
            }
        }
    };
    match outcome {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(CmdError::Usage(msg)) => usage_error(&msg),
        Err(CmdError::Runtime(msg)) => runtime_error(&msg),
    }
}
