//! Experiment harness: convergence sweeps over h and epsilon, long-horizon
//! conservation runs, and the CSV serialization of both.
//!
//! A sweep is a deterministic grid of independent cells; cells may run
//! concurrently but result assembly always follows grid order, so two
//! executions of the same spec produce byte-identical CSV.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

use crate::fields::FieldModel;
use crate::integrators::{boris_run, fvi_run, reference_solve, RunResult, SamplePolicy, SolverConfig};
use crate::linalg3::Vec3;
use crate::observables::{
    drift_series, relative_errors, sample_observables, DriftRecord, ErrorRecord, ObservableError,
    ObservableSample,
};

pub const REFERENCE_TOL: f64 = 1e-12;
pub const DEFAULT_STEP_BUDGET: u64 = 100_000_000;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid sweep specification: {0}")]
    InvalidSpec(String),
    #[error("writing {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Fvi,
    Boris,
    Reference,
}

impl Method {
    pub fn parse(label: &str) -> Option<Method> {
        match label {
            "fvi" => Some(Method::Fvi),
            "boris" => Some(Method::Boris),
            "reference" => Some(Method::Reference),
            _ => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Fvi => "fvi",
            Method::Boris => "boris",
            Method::Reference => "reference",
        })
    }
}

/// How the step size of a cell relates to its epsilon.
#[derive(Debug, Clone, Copy)]
pub enum Coupling {
    /// Cells are the cartesian product h_grid x eps_grid.
    Independent,
    /// h = alpha * eps per eps-grid entry (h_grid unused).
    HProportionalEps(f64),
    /// h = alpha * sqrt(eps) per eps-grid entry (h_grid unused).
    HProportionalSqrtEps(f64),
}

#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub problem: String,
    pub method: Method,
    pub h_grid: Vec<f64>,
    pub eps_grid: Vec<f64>,
    pub coupling: Coupling,
    pub t_end: f64,
    pub sample_stride: u64,
    /// Worker threads for cell execution; 0 lets rayon pick.
    pub parallelism: usize,
    pub step_budget: u64,
}

impl SweepSpec {
    pub fn new(problem: &str, method: Method, t_end: f64) -> Self {
        Self {
            problem: problem.to_string(),
            method,
            h_grid: Vec::new(),
            eps_grid: vec![1.0],
            coupling: Coupling::Independent,
            t_end,
            sample_stride: 1,
            parallelism: 0,
            step_budget: DEFAULT_STEP_BUDGET,
        }
    }

    fn validate(&self) -> Result<(), HarnessError> {
        let check_grid = |name: &str, grid: &[f64]| -> Result<(), HarnessError> {
            if grid.is_empty() {
                return Err(HarnessError::InvalidSpec(format!("{name} grid is empty")));
            }
            for w in grid.windows(2) {
                if !(w[1] < w[0]) {
                    return Err(HarnessError::InvalidSpec(format!(
                        "{name} grid must be strictly descending"
                    )));
                }
            }
            if grid.iter().any(|&g| !(g > 0.0) || !g.is_finite()) {
                return Err(HarnessError::InvalidSpec(format!(
                    "{name} grid entries must be positive and finite"
                )));
            }
            Ok(())
        };
        match self.coupling {
            Coupling::Independent => {
                check_grid("h", &self.h_grid)?;
                check_grid("eps", &self.eps_grid)?;
            }
            Coupling::HProportionalEps(a) | Coupling::HProportionalSqrtEps(a) => {
                check_grid("eps", &self.eps_grid)?;
                if !(a > 0.0) {
                    return Err(HarnessError::InvalidSpec(
                        "coupling factor must be positive".into(),
                    ));
                }
            }
        }
        if !(self.t_end > 0.0) {
            return Err(HarnessError::InvalidSpec("t_end must be positive".into()));
        }
        Ok(())
    }

    /// Grid cells `(h, eps)` in specification order.
    pub fn cells(&self) -> Vec<(f64, f64)> {
        match self.coupling {
            Coupling::Independent => {
                let mut out = Vec::with_capacity(self.h_grid.len() * self.eps_grid.len());
                for &h in &self.h_grid {
                    for &eps in &self.eps_grid {
                        out.push((h, eps));
                    }
                }
                out
            }
            Coupling::HProportionalEps(a) => {
                self.eps_grid.iter().map(|&e| (a * e, e)).collect()
            }
            Coupling::HProportionalSqrtEps(a) => {
                self.eps_grid.iter().map(|&e| (a * e.sqrt(), e)).collect()
            }
        }
    }
}

/// One trajectory sample with invariant drifts relative to the first
/// (`t_{1/2}`) sample of its run.
#[derive(Debug, Clone, Copy)]
pub struct TrajectoryPoint {
    pub t: f64,
    pub x: Vec3,
    pub v: Vec3,
    pub e_h: f64,
    pub e_m: Option<f64>,
    pub e_i: f64,
    pub iters: u32,
}

#[derive(Debug, Clone, Default)]
pub struct CellRecord {
    pub h: f64,
    pub eps: f64,
    pub error: Option<ErrorRecord>,
    /// Observed order against the previous grid cell (same eps, coarser h).
    pub order_x: Option<f64>,
    pub drift: Option<DriftRecord>,
    pub trajectory: Vec<TrajectoryPoint>,
    pub max_iterations: u32,
    pub non_converged_steps: u64,
    pub skipped: bool,
    pub note: Option<String>,
    pub wall_secs: f64,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub problem: String,
    pub method: Method,
    pub t_end: f64,
    pub cells: Vec<CellRecord>,
}

impl SweepResult {
    /// Least-squares log-log slope of `metric` against eps over the finest
    /// (smallest-eps) half of the non-skipped cells; the coarse half is
    /// usually pre-asymptotic.
    pub fn slope_finest_half(&self, metric: impl Fn(&CellRecord) -> Option<f64>) -> Option<f64> {
        let mut pts: Vec<(f64, f64)> = self
            .cells
            .iter()
            .filter(|c| !c.skipped)
            .filter_map(|c| metric(c).map(|m| (c.eps, m)))
            .collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        pts.truncate(pts.len().div_ceil(2).max(2).min(pts.len()));
        loglog_slope(&pts)
    }
}

/// Least-squares slope of ln(y) against ln(x). Needs two or more points with
/// positive coordinates.
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    let logs: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if logs.len() < 2 {
        return None;
    }
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

fn run_with_method(
    model: &FieldModel,
    method: Method,
    h: f64,
    t_end: f64,
    sampler: SamplePolicy,
) -> Result<RunResult, String> {
    match method {
        Method::Fvi => {
            fvi_run(model, SolverConfig::new(h, t_end), model.x_init, model.v_init, sampler)
                .map_err(|e| e.to_string())
        }
        Method::Boris => boris_run(model, h, t_end, model.x_init, model.v_init, sampler)
            .map_err(|e| e.to_string()),
        Method::Reference => Err("reference method has no fixed-step run".into()),
    }
}

/// Midpoint observable samples of a run, plus drift-annotated trajectory
/// points (drifts relative to the first sample).
fn observable_trajectory(
    model: &FieldModel,
    run: &RunResult,
) -> Result<(Vec<ObservableSample>, Vec<TrajectoryPoint>), ObservableError> {
    let mut samples = Vec::with_capacity(run.records.len());
    for r in &run.records {
        samples.push(sample_observables(model, r.t_mid, r.x_mid, r.v_mid)?);
    }
    let points = match samples.first() {
        None => Vec::new(),
        Some(first) => run
            .records
            .iter()
            .zip(&samples)
            .map(|(r, s)| TrajectoryPoint {
                t: r.t_mid,
                x: r.x_mid,
                v: r.v_mid,
                e_h: s.energy - first.energy,
                e_m: s.momentum.zip(first.momentum).map(|(a, b)| a - b),
                e_i: s.magnetic_moment - first.magnetic_moment,
                iters: r.iterations,
            })
            .collect(),
    };
    Ok((samples, points))
}

fn map_cells<F>(spec: &SweepSpec, f: F) -> Vec<CellRecord>
where
    F: Fn(f64, f64) -> CellRecord + Send + Sync,
{
    let cells = spec.cells();
    let work = |cells: &[(f64, f64)]| -> Vec<CellRecord> {
        cells.par_iter().map(|&(h, eps)| f(h, eps)).collect()
    };
    if spec.parallelism > 0 {
        match rayon::ThreadPoolBuilder::new()
            .num_threads(spec.parallelism)
            .build()
        {
            Ok(pool) => pool.install(|| work(&cells)),
            Err(_) => work(&cells),
        }
    } else {
        work(&cells)
    }
}

fn failed_cell(h: f64, eps: f64, note: String, started: Instant) -> CellRecord {
    CellRecord {
        h,
        eps,
        note: Some(note),
        wall_secs: started.elapsed().as_secs_f64(),
        ..CellRecord::default()
    }
}

/// Integrate each cell with the named method and compare the terminal state
/// against the adaptive reference at `t_end`. Cells the reference refuses
/// (cost guard) are marked skipped; other per-cell failures are recorded in
/// the cell note and the sweep continues.
pub fn convergence_sweep(spec: &SweepSpec) -> Result<SweepResult, HarnessError> {
    spec.validate()?;
    let mut cells = map_cells(spec, |h, eps| {
        let started = Instant::now();
        let model = match FieldModel::by_label(&spec.problem, eps) {
            Ok(m) => m,
            Err(e) => return failed_cell(h, eps, e.to_string(), started),
        };
        if model.epsilon <= 1e-4 && spec.t_end > 10.0 {
            return CellRecord {
                h,
                eps,
                skipped: true,
                note: Some("reference cost guard".into()),
                wall_secs: started.elapsed().as_secs_f64(),
                ..CellRecord::default()
            };
        }
        // fixed-step methods end at round(t_end/h) steps, which is not t_end
        // when h does not divide it; compare at the step grid's endpoint
        let t_final = (spec.t_end / h).round().max(1.0) * h;
        let reference =
            match reference_solve(&model, model.x_init, model.v_init, t_final, REFERENCE_TOL) {
                Ok(s) => s,
                Err(e) => return failed_cell(h, eps, e.to_string(), started),
            };
        let (exact_x, exact_v) = reference.final_state();
        let (numeric, max_iterations, non_converged) = if spec.method == Method::Reference {
            // self-comparison baseline: zero errors by construction
            (reference.final_state(), 0, 0)
        } else {
            // terminal state only; thin samples aggressively
            let sampler = SamplePolicy::every(u64::MAX);
            match run_with_method(&model, spec.method, h, t_final, sampler) {
                Ok(run) => match run.final_state {
                    Some(s) => (
                        (s.x_curr, s.v_curr),
                        run.max_iterations,
                        run.non_converged_steps,
                    ),
                    None => return failed_cell(h, eps, "run produced no steps".into(), started),
                },
                Err(e) => return failed_cell(h, eps, e, started),
            }
        };
        let error = relative_errors(model.b0, numeric.0, numeric.1, exact_x, exact_v);
        CellRecord {
            h,
            eps,
            error: Some(error),
            max_iterations,
            non_converged_steps: non_converged,
            wall_secs: started.elapsed().as_secs_f64(),
            ..CellRecord::default()
        }
    });

    // observed orders between consecutive cells at the same eps, attached to
    // the finer cell
    for i in 1..cells.len() {
        let (prev, cur) = {
            let (a, b) = cells.split_at(i);
            (&a[i - 1], &b[0])
        };
        if prev.eps == cur.eps || matches!(spec.coupling, Coupling::HProportionalEps(_) | Coupling::HProportionalSqrtEps(_)) {
            if let (Some(ep), Some(ec)) = (&prev.error, &cur.error) {
                if ep.error_x > 0.0 && ec.error_x > 0.0 && cur.h < prev.h {
                    let order = (ep.error_x / ec.error_x).ln() / (prev.h / cur.h).ln();
                    cells[i].order_x = Some(order);
                }
            }
        }
    }

    Ok(SweepResult {
        problem: spec.problem.clone(),
        method: spec.method,
        t_end: spec.t_end,
        cells,
    })
}

/// Long-horizon run per cell recording invariant drifts; no reference solve.
/// The `reference` method label is rejected here.
pub fn conservation_run(spec: &SweepSpec) -> Result<SweepResult, HarnessError> {
    spec.validate()?;
    if spec.method == Method::Reference {
        return Err(HarnessError::InvalidSpec(
            "conservation runs use a fixed-step method (fvi or boris)".into(),
        ));
    }
    let cells = map_cells(spec, |h, eps| {
        let started = Instant::now();
        let model = match FieldModel::by_label(&spec.problem, eps) {
            Ok(m) => m,
            Err(e) => return failed_cell(h, eps, e.to_string(), started),
        };
        let steps = (spec.t_end / h).round() as u64;
        if steps > spec.step_budget {
            return CellRecord {
                h,
                eps,
                skipped: true,
                note: Some(format!(
                    "step budget exceeded: {steps} > {}",
                    spec.step_budget
                )),
                wall_secs: started.elapsed().as_secs_f64(),
                ..CellRecord::default()
            };
        }
        let sampler = SamplePolicy::every(spec.sample_stride);
        let run = match run_with_method(&model, spec.method, h, spec.t_end, sampler) {
            Ok(r) => r,
            Err(e) => return failed_cell(h, eps, e, started),
        };
        let (samples, trajectory) = match observable_trajectory(&model, &run) {
            Ok(v) => v,
            Err(e) => return failed_cell(h, eps, e.to_string(), started),
        };
        CellRecord {
            h,
            eps,
            drift: Some(drift_series(&samples)),
            trajectory,
            max_iterations: run.max_iterations,
            non_converged_steps: run.non_converged_steps,
            wall_secs: started.elapsed().as_secs_f64(),
            ..CellRecord::default()
        }
    });
    Ok(SweepResult {
        problem: spec.problem.clone(),
        method: spec.method,
        t_end: spec.t_end,
        cells,
    })
}

// ---------------------------------------------------------------------------
// CSV output
// ---------------------------------------------------------------------------

/// Shortest decimal that round-trips to the same f64 (Rust's f64 Display).
fn num(v: f64) -> String {
    format!("{v}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn write_lines(path: &Path, lines: &[String]) -> Result<(), HarnessError> {
    let err = |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(err)?);
    for line in lines {
        writeln!(w, "{line}").map_err(err)?;
    }
    w.flush().map_err(err)
}

pub const SWEEP_HEADER: &str =
    "problem,method,h,eps,t_end,error_x,error_v,error_vpar,error_vperp,order_x,skipped";
pub const TRAJECTORY_HEADER: &str = "t,x1,x2,x3,v1,v2,v3,e_H,e_M,e_I,iters";
pub const DRIFT_HEADER: &str =
    "problem,method,h,eps,t_end,max_eH,max_eM,max_eI,first_decile_eH,last_decile_eH";

pub fn sweep_csv_lines(result: &SweepResult) -> Vec<String> {
    let mut lines = vec![SWEEP_HEADER.to_string()];
    for c in &result.cells {
        lines.push(format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            result.problem,
            result.method,
            num(c.h),
            num(c.eps),
            num(result.t_end),
            opt(c.error.as_ref().map(|e| e.error_x)),
            opt(c.error.as_ref().map(|e| e.error_v)),
            opt(c.error.as_ref().map(|e| e.error_vpar)),
            opt(c.error.as_ref().map(|e| e.error_vperp)),
            opt(c.order_x),
            c.skipped,
        ));
    }
    lines
}

pub fn drift_csv_lines(result: &SweepResult) -> Vec<String> {
    let mut lines = vec![DRIFT_HEADER.to_string()];
    for c in &result.cells {
        let d = c.drift.as_ref();
        lines.push(format!(
            "{},{},{},{},{},{},{},{},{},{}",
            result.problem,
            result.method,
            num(c.h),
            num(c.eps),
            num(result.t_end),
            opt(d.map(|d| d.energy.max)),
            opt(d.and_then(|d| d.momentum.map(|m| m.max))),
            opt(d.map(|d| d.magnetic_moment.max)),
            opt(d.map(|d| d.energy.first_decile_max)),
            opt(d.map(|d| d.energy.last_decile_max)),
        ));
    }
    lines
}

pub fn trajectory_csv_lines(points: &[TrajectoryPoint]) -> Vec<String> {
    let mut lines = vec![TRAJECTORY_HEADER.to_string()];
    for p in points {
        lines.push(format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            num(p.t),
            num(p.x.x),
            num(p.x.y),
            num(p.x.z),
            num(p.v.x),
            num(p.v.y),
            num(p.v.z),
            num(p.e_h),
            opt(p.e_m),
            num(p.e_i),
            p.iters,
        ));
    }
    lines
}

/// Write a convergence sweep as sweep rows.
pub fn emit_sweep_csv(result: &SweepResult, path: &Path) -> Result<(), HarnessError> {
    write_lines(path, &sweep_csv_lines(result))
}

/// Write a conservation run as drift summary rows.
pub fn emit_drift_csv(result: &SweepResult, path: &Path) -> Result<(), HarnessError> {
    write_lines(path, &drift_csv_lines(result))
}

/// Write a single trajectory as trajectory rows.
pub fn emit_trajectory_csv(points: &[TrajectoryPoint], path: &Path) -> Result<(), HarnessError> {
    write_lines(path, &trajectory_csv_lines(points))
}

/// Build the drift-annotated trajectory of a single run, for `emit_trajectory_csv`.
pub fn single_run(
    problem: &str,
    method: Method,
    h: f64,
    eps: f64,
    t_end: f64,
    stride: u64,
    strict: bool,
) -> Result<(CellRecord, Vec<TrajectoryPoint>), HarnessError> {
    let model = FieldModel::by_label(problem, eps)
        .map_err(|e| HarnessError::InvalidSpec(e.to_string()))?;
    let run = match method {
        Method::Fvi => {
            let mut cfg = SolverConfig::new(h, t_end);
            cfg.strict = strict;
            fvi_run(&model, cfg, model.x_init, model.v_init, SamplePolicy::every(stride))
        }
        Method::Boris => {
            boris_run(&model, h, t_end, model.x_init, model.v_init, SamplePolicy::every(stride))
        }
        Method::Reference => {
            return Err(HarnessError::InvalidSpec(
                "single runs use a fixed-step method (fvi or boris)".into(),
            ))
        }
    }
    .map_err(|e| HarnessError::InvalidSpec(e.to_string()))?;
    let (samples, trajectory) =
        observable_trajectory(&model, &run).map_err(|e| HarnessError::InvalidSpec(e.to_string()))?;
    let cell = CellRecord {
        h,
        eps,
        drift: Some(drift_series(&samples)),
        max_iterations: run.max_iterations,
        non_converged_steps: run.non_converged_steps,
        ..CellRecord::default()
    };
    Ok((cell, trajectory))
}
