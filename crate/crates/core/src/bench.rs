//! Runs configured solvers and writes `values.csv`, `grid.csv` and
//! `report.txt`; refinement studies write `study.csv`.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::Path;
use std::time::Instant;

use thiserror::Error;

use crate::config::{ConfigError, ProblemSpec, RunConfig, SolverKind};
use crate::dpp::{self, DppError, DppOptions, SolveReport};
use crate::fd::{self, FdError, FdOptions, InnerSolver};
use crate::geometry::Domain;
use crate::grid::{build_grid, ValueGrid};
use crate::simulate::{estimate_value, PathConfig, Policy, SimError};
use crate::symmat::{enumerate_controls, SymError};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dpp(#[from] DppError),
    #[error(transparent)]
    Fd(#[from] FdError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Sym(#[from] SymError),
    #[error("writing {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("{0}")]
    Study(String),
}

impl RunError {
    /// Process exit status: 2 when a solver failed to converge, else 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Sim(SimError::AllCensored(_)) => 2,
            _ => 1,
        }
    }
}

/// Closed form registered for `spec`, if any: constant `f` and `g` on a ball.
///
/// * `f = 0`: `u = g`.
/// * `f > 0`: the Hessian is negative, `u = g + f (R^2 - |x-c|^2) / (lam N)`.
/// * `f < 0`: the Hessian is positive, `u = g + f (R^2 - |x-c|^2) / (Lam N)`.
pub fn analytic_value(spec: &ProblemSpec, x: &[f64]) -> Option<f64> {
    let Domain::Ball { center, radius } = &spec.domain else {
        return None;
    };
    let f = spec.f.constant_value()?;
    let g = spec.g.constant_value()?;
    if !spec.domain.in_closure(x) {
        return None;
    }
    let r2: f64 = x.iter().zip(center).map(|(a, c)| (a - c) * (a - c)).sum();
    let n = spec.dim as f64;
    let a = if f > 0.0 {
        spec.ell.lam()
    } else {
        spec.ell.big_lam()
    };
    Some(g + f * (radius * radius - r2) / (a * n))
}

/// Reference value from `cfg.exact` or the built-in table.
pub fn reference_value(spec: &ProblemSpec, cfg: &RunConfig, x: &[f64]) -> Option<f64> {
    match &cfg.exact {
        Some(e) => Some(e.at(x)),
        None => analytic_value(spec, x),
    }
}

/// One row of `values.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueRow {
    pub point: Vec<f64>,
    pub estimate: f64,
    /// Monte Carlo standard error, or the grid solver's final residual.
    pub stderr: f64,
    pub solver: &'static str,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct GridRun {
    pub grid: ValueGrid,
    pub report: SolveReport,
    pub runtime_ms: u128,
}

/// Everything a run produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub rows: Vec<ValueRow>,
    pub dpp: Option<GridRun>,
    pub fd: Option<GridRun>,
    pub report: String,
    /// All solvers converged and no estimate carries a censoring warning.
    pub converged: bool,
}

impl RunOutcome {
    pub fn exit_code(&self) -> i32 {
        if self.converged {
            0
        } else {
            2
        }
    }
}

fn path_config(spec: &ProblemSpec, cfg: &RunConfig, dt: f64) -> Result<PathConfig, RunError> {
    Ok(PathConfig::new(dt, cfg.max_time(spec), cfg.seed)?.with_refinement(cfg.exit_refinement))
}

/// Grid value at `x`: interpolated inside the domain, `g` outside.
pub fn grid_value(spec: &ProblemSpec, grid: &ValueGrid, x: &[f64]) -> Option<f64> {
    if spec.domain.inside(x) {
        grid.interpolate(x)
    } else {
        Some(spec.g.at(x))
    }
}

pub fn run_dpp(spec: &ProblemSpec, cfg: &RunConfig) -> Result<GridRun, RunError> {
    let start = Instant::now();
    let controls = enumerate_controls(spec.dim, spec.ell, cfg.angles, cfg.levels)?;
    let grid = build_grid(&spec.domain, &spec.g, cfg.h).map_err(DppError::from)?;
    let opts = DppOptions {
        dt: cfg.dt_dpp(spec),
        reach: cfg.reach,
        tol: cfg.tol(spec),
        max_iter: cfg.max_iter,
        method: cfg.method,
        init: 0.0,
    };
    let (grid, report) = dpp::solve(grid, &spec.domain, &controls, &spec.f, &spec.g, &opts)?;
    Ok(GridRun {
        grid,
        report,
        runtime_ms: start.elapsed().as_millis(),
    })
}

pub fn run_fd(spec: &ProblemSpec, cfg: &RunConfig) -> Result<GridRun, RunError> {
    let start = Instant::now();
    let opts = FdOptions {
        angles: cfg.stencil_angles,
        radius: cfg.stencil_radius,
        tol: cfg.tol(spec),
        max_iter: cfg.max_iter,
        inner: InnerSolver::Direct,
    };
    let (grid, report) = fd::solve_policy_iteration(&spec.domain, &spec.f, &spec.g, cfg.h, spec.ell, &opts)?;
    Ok(GridRun {
        grid,
        report,
        runtime_ms: start.elapsed().as_millis(),
    })
}

fn grid_rows(spec: &ProblemSpec, cfg: &RunConfig, run: &GridRun, solver: &'static str) -> Vec<ValueRow> {
    cfg.eval_points
        .iter()
        .map(|x| ValueRow {
            point: x.clone(),
            estimate: grid_value(spec, &run.grid, x).unwrap_or(f64::NAN),
            stderr: run.report.final_residual,
            solver,
            seed: cfg.seed,
        })
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6e}")).unwrap_or_else(|| "-".into())
}

fn report_solve(out: &mut String, name: &str, run: &GridRun) {
    let r = &run.report;
    let _ = writeln!(
        out,
        "{name}: converged={} iterations={} final_residual={:.3e} dt_dpp={:.3e} interior_nodes={} runtime_ms={}",
        r.converged,
        r.iterations,
        r.final_residual,
        r.dt_dpp,
        run.grid.interior_nodes().len(),
        run.runtime_ms
    );
    let _ = writeln!(out, "{name} residuals: {}", r.residuals.iter().map(|v| format!("{v:.3e}")).collect::<Vec<_>>().join(" "));
}

/// Executes the configured solver(s). Files are not written; see
/// [`write_outputs`].
pub fn run(spec: &ProblemSpec, cfg: &RunConfig) -> Result<RunOutcome, RunError> {
    let mut report = String::new();
    let _ = writeln!(report, "problem: dim={} lam={} Lam={} domain={} f={} g={}", spec.dim, spec.ell.lam(), spec.ell.big_lam(), spec.domain.kind_name(), spec.f.source(), spec.g.source());
    let _ = writeln!(report, "ell estimate: {:.6e}", spec.ell_estimate);
    let _ = writeln!(report, "solver: {} seed={}", cfg.solver.as_str(), cfg.seed);
    let mut rows = Vec::new();
    let mut converged = true;
    let mut dpp_run = None;
    let mut fd_run = None;

    match cfg.solver {
        SolverKind::McFixedControl => {
            let start = Instant::now();
            let control = cfg.control(spec)?;
            let policy = Policy::Constant(control);
            let pc = path_config(spec, cfg, cfg.dt)?;
            let _ = writeln!(report, "paths={} dt={} max_time={} exit_refinement={}", cfg.n_paths, cfg.dt, pc.max_time(), cfg.exit_refinement.as_str());
            for x in &cfg.eval_points {
                let est = estimate_value(x, &policy, &spec.domain, &spec.f, &spec.g, cfg.n_paths, &pc)?;
                if let Some(w) = &est.warning {
                    converged = false;
                    let _ = writeln!(report, "warning at {x:?}: {w}");
                }
                let _ = writeln!(report, "point {x:?}: mean={:.6e} stderr={:.3e} censor_rate={:.4} reference={}", est.mean, est.stderr, est.censor_rate, fmt_opt(reference_value(spec, cfg, x)));
                rows.push(ValueRow {
                    point: x.clone(),
                    estimate: est.mean,
                    stderr: est.stderr,
                    solver: SolverKind::McFixedControl.as_str(),
                    seed: cfg.seed,
                });
            }
            let _ = writeln!(report, "runtime_ms={}", start.elapsed().as_millis());
        }
        SolverKind::DppGrid | SolverKind::CrossCheck | SolverKind::FdOracle => {
            if cfg.solver != SolverKind::FdOracle {
                let r = run_dpp(spec, cfg)?;
                report_solve(&mut report, "dpp_grid", &r);
                converged &= r.report.converged;
                rows.extend(grid_rows(spec, cfg, &r, "dpp_grid"));
                dpp_run = Some(r);
            }
            if cfg.solver != SolverKind::DppGrid {
                let r = run_fd(spec, cfg)?;
                report_solve(&mut report, "fd_oracle", &r);
                converged &= r.report.converged;
                rows.extend(grid_rows(spec, cfg, &r, "fd_oracle"));
                fd_run = Some(r);
            }
            for x in &cfg.eval_points {
                let reference = reference_value(spec, cfg, x);
                let d = dpp_run.as_ref().and_then(|r| grid_value(spec, &r.grid, x));
                let f = fd_run.as_ref().and_then(|r| grid_value(spec, &r.grid, x));
                let _ = write!(report, "point {x:?}: reference={}", fmt_opt(reference));
                if let Some(d) = d {
                    let _ = write!(report, " dpp={d:.6e} |dpp-ref|={}", fmt_opt(reference.map(|r| (d - r).abs())));
                }
                if let Some(f) = f {
                    let _ = write!(report, " fd={f:.6e} |fd-ref|={}", fmt_opt(reference.map(|r| (f - r).abs())));
                }
                if let (Some(d), Some(f)) = (d, f) {
                    let _ = write!(report, " |dpp-fd|={:.3e}", (d - f).abs());
                }
                let _ = writeln!(report);
            }
            if let (Some(a), Some(b)) = (&dpp_run, &fd_run) {
                let gap = a.grid.max_abs_diff(&b.grid).unwrap_or(f64::NAN);
                let _ = writeln!(report, "max |u_dpp - u_fd| over shared interior nodes: {gap:.3e} ({:.3e} ell)", gap / spec.ell_estimate);
            }
            if cfg.certify {
                if let Some(r) = &dpp_run {
                    let controls = enumerate_controls(spec.dim, spec.ell, cfg.angles, cfg.levels)?;
                    let pc = path_config(spec, cfg, cfg.dt)?;
                    for x in &cfg.eval_points {
                        let c = dpp::mc_certify(x, &r.grid, &controls, &spec.domain, &spec.f, &spec.g, cfg.n_paths, &pc)?;
                        let _ = writeln!(
                            report,
                            "certify {x:?}: policy_mc={:.6e} stderr={:.3e} grid={:.6e} gap={:.3e} observed_C={:.3}",
                            c.lower.mean, c.lower.stderr, c.grid_value, c.gap, c.observed_constant
                        );
                        rows.push(ValueRow {
                            point: x.clone(),
                            estimate: c.lower.mean,
                            stderr: c.lower.stderr,
                            solver: "mc_policy",
                            seed: cfg.seed,
                        });
                    }
                }
            }
        }
    }
    let _ = writeln!(report, "status: {}", if converged { "ok" } else { "not converged" });
    Ok(RunOutcome {
        rows,
        dpp: dpp_run,
        fd: fd_run,
        report,
        converged,
    })
}

/// `x1..xN,estimate,stderr,solver,seed`, floats in shortest round-trip form.
pub fn write_values_csv<W: Write>(mut w: W, dim: usize, rows: &[ValueRow]) -> io::Result<()> {
    let cols: Vec<String> = (1..=dim).map(|i| format!("x{i}")).collect();
    writeln!(w, "{},estimate,stderr,solver,seed", cols.join(","))?;
    for r in rows {
        for x in &r.point {
            write!(w, "{x:?},")?;
        }
        writeln!(w, "{:?},{:?},{},{}", r.estimate, r.stderr, r.solver, r.seed)?;
    }
    Ok(())
}

fn write_file(dir: &Path, name: &str, f: impl FnOnce(&mut Vec<u8>) -> io::Result<()>) -> Result<(), RunError> {
    let path = dir.join(name);
    let mut buf = Vec::new();
    let io_err = |source| RunError::Io {
        path: path.display().to_string(),
        source,
    };
    f(&mut buf).map_err(io_err)?;
    fs::write(&path, buf).map_err(io_err)
}

/// Writes `values.csv`, `report.txt` and any grids into `cfg.output`.
pub fn write_outputs(spec: &ProblemSpec, cfg: &RunConfig, outcome: &RunOutcome) -> Result<(), RunError> {
    let dir = &cfg.output;
    fs::create_dir_all(dir).map_err(|source| RunError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    write_file(dir, "values.csv", |b| write_values_csv(b, spec.dim, &outcome.rows))?;
    if let Some(r) = &outcome.dpp {
        write_file(dir, "grid.csv", |b| r.grid.write_csv(b))?;
    }
    if let Some(r) = &outcome.fd {
        let name = if outcome.dpp.is_some() { "grid_fd.csv" } else { "grid.csv" };
        write_file(dir, name, |b| r.grid.write_csv(b))?;
    }
    write_file(dir, "report.txt", |b| b.write_all(outcome.report.as_bytes()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Knob {
    Dt,
    H,
    NPaths,
}

impl Knob {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "dt" => Some(Knob::Dt),
            "h" => Some(Knob::H),
            "n_paths" => Some(Knob::NPaths),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Knob::Dt => "dt",
            Knob::H => "h",
            Knob::NPaths => "n_paths",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyRow {
    pub value: f64,
    pub estimate: f64,
    pub stderr: f64,
    pub error: Option<f64>,
    /// Observed order against the previous rung: of the error for `dt` and
    /// `h`, of the standard error for `n_paths`.
    pub order: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyTable {
    pub knob: Knob,
    pub solver: &'static str,
    pub point: Vec<f64>,
    pub rows: Vec<StudyRow>,
}

impl StudyTable {
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "knob,value,solver,estimate,stderr,error,order")?;
        let opt = |v: Option<f64>| v.map(|v| format!("{v:?}")).unwrap_or_default();
        for r in &self.rows {
            writeln!(
                w,
                "{},{:?},{},{:?},{:?},{},{}",
                self.knob.as_str(),
                r.value,
                self.solver,
                r.estimate,
                r.stderr,
                opt(r.error),
                opt(r.order)
            )?;
        }
        Ok(())
    }
}

/// Reruns the configured solver at each rung of `ladder` (at the first
/// evaluation point) and tabulates errors and observed orders. `dt` and
/// `n_paths` studies use Monte Carlo; `h` studies use the configured grid
/// solver (the finite-difference oracle for `cross_check`).
pub fn convergence_study(spec: &ProblemSpec, cfg: &RunConfig, knob: Knob, ladder: &[f64]) -> Result<StudyTable, RunError> {
    if ladder.len() < 2 {
        return Err(RunError::Study("a ladder needs at least two rungs".into()));
    }
    let ascending = ladder.windows(2).all(|w| w[0] < w[1]);
    let descending = ladder.windows(2).all(|w| w[0] > w[1]);
    if !(ascending || descending) {
        return Err(RunError::Study("ladder must be strictly sorted".into()));
    }
    if ladder.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(RunError::Study("ladder values must be positive".into()));
    }
    let x = cfg.eval_points[0].clone();
    let reference = reference_value(spec, cfg, &x);
    let mut rows: Vec<StudyRow> = Vec::new();
    let solver = match knob {
        Knob::Dt | Knob::NPaths => SolverKind::McFixedControl.as_str(),
        Knob::H => match cfg.solver {
            SolverKind::DppGrid => "dpp_grid",
            SolverKind::FdOracle | SolverKind::CrossCheck => "fd_oracle",
            SolverKind::McFixedControl => {
                return Err(RunError::Study("an h study needs a grid solver".into()))
            }
        },
    };
    for &v in ladder {
        let mut c = cfg.clone();
        let (estimate, stderr) = match knob {
            Knob::Dt | Knob::NPaths => {
                if knob == Knob::Dt {
                    c.dt = v;
                } else {
                    c.n_paths = v as usize;
                }
                let pc = path_config(spec, &c, c.dt)?;
                let policy = Policy::Constant(c.control(spec)?);
                let est = estimate_value(&x, &policy, &spec.domain, &spec.f, &spec.g, c.n_paths, &pc)?;
                (est.mean, est.stderr)
            }
            Knob::H => {
                c.h = v;
                let r = if solver == "dpp_grid" { run_dpp(spec, &c)? } else { run_fd(spec, &c)? };
                (grid_value(spec, &r.grid, &x).unwrap_or(f64::NAN), r.report.final_residual)
            }
        };
        let error = reference.map(|r| (estimate - r).abs());
        let order = rows.last().and_then(|prev| match knob {
            Knob::NPaths => Some((prev.stderr / stderr).ln() / (v / prev.value).ln()),
            _ => {
                let (e0, e1) = (prev.error?, error?);
                Some((e0 / e1).ln() / (prev.value / v).ln())
            }
        });
        rows.push(StudyRow {
            value: v,
            estimate,
            stderr,
            error,
            order,
        });
    }
    Ok(StudyTable {
        knob,
        solver,
        point: x,
        rows,
    })
}
