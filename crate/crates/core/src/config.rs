//! TOML run configuration: a `[problem]` table and a `[solver]` table.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dpp::{SolveMethod, StencilReach};
use crate::exprlang::{ExprError, ScalarField};
use crate::geometry::Domain;
use crate::simulate::ExitRefinement;
use crate::symmat::{Control, Ellipticity, MAX_DIM};

/// Sample count for the bound `ell` on `|f|` and `|g|`.
pub const ELL_SAMPLES: usize = 100_000;
/// Floor for the sampled bound so that derived tolerances stay positive.
pub const ELL_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("malformed config: {0}")]
    Syntax(String),
    #[error("{key}: {message}")]
    Invalid { key: String, message: String },
    #[error("{key}: {source}")]
    Expression {
        key: String,
        #[source]
        source: ExprError,
    },
}

fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFile {
    problem: RawProblem,
    #[serde(default)]
    solver: RawSolver,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProblem {
    dim: usize,
    lam: f64,
    #[serde(rename = "Lam")]
    big_lam: f64,
    f: String,
    g: String,
    domain: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    center: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    radius: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lo: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    hi: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    r_inner: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    r_outer: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSolver {
    kind: Option<String>,
    dt: Option<f64>,
    n_paths: Option<usize>,
    h: Option<f64>,
    dt_dpp: Option<f64>,
    angles: Option<usize>,
    levels: Option<usize>,
    stencil_angles: Option<usize>,
    stencil_radius: Option<i32>,
    reach: Option<String>,
    method: Option<String>,
    tol: Option<f64>,
    max_iter: Option<usize>,
    max_time: Option<f64>,
    seed: Option<u64>,
    exit_refinement: Option<String>,
    sigma: Option<Vec<Vec<f64>>>,
    eval_points: Option<Vec<Vec<f64>>>,
    output: Option<String>,
    threads: Option<usize>,
    exact: Option<String>,
    certify: Option<bool>,
}

/// The boundary value problem and its data.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    pub dim: usize,
    pub ell: Ellipticity,
    pub domain: Domain,
    pub f: ScalarField,
    pub g: ScalarField,
    /// Sampled `max(|f|, |g|)` over the closed domain (floored at `ELL_FLOOR`).
    pub ell_estimate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverKind {
    McFixedControl,
    DppGrid,
    FdOracle,
    CrossCheck,
}

impl SolverKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SolverKind::McFixedControl => "mc_fixed_control",
            SolverKind::DppGrid => "dpp_grid",
            SolverKind::FdOracle => "fd_oracle",
            SolverKind::CrossCheck => "cross_check",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "mc_fixed_control" => SolverKind::McFixedControl,
            "dpp_grid" => SolverKind::DppGrid,
            "fd_oracle" => SolverKind::FdOracle,
            "cross_check" => SolverKind::CrossCheck,
            _ => return None,
        })
    }
}

/// Numeric knobs and outputs. `None` fields take problem-dependent
/// defaults through the accessor methods.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub solver: SolverKind,
    pub dt: f64,
    pub n_paths: usize,
    pub h: f64,
    pub dt_dpp: Option<f64>,
    pub angles: usize,
    pub levels: usize,
    pub stencil_angles: usize,
    pub stencil_radius: i32,
    pub reach: StencilReach,
    pub method: SolveMethod,
    pub tol: Option<f64>,
    pub max_iter: usize,
    pub max_time: Option<f64>,
    pub seed: u64,
    pub exit_refinement: ExitRefinement,
    /// Row-major constant control for `mc_fixed_control`.
    pub sigma: Option<Vec<f64>>,
    pub eval_points: Vec<Vec<f64>>,
    pub output: PathBuf,
    pub threads: Option<usize>,
    /// Reference solution for error columns, overriding the built-in table.
    pub exact: Option<ScalarField>,
    /// Run Monte Carlo under the extracted grid policy at each point.
    pub certify: bool,
}

impl RunConfig {
    /// `h^2 / (N Lam)` unless set.
    pub fn dt_dpp(&self, spec: &ProblemSpec) -> f64 {
        self.dt_dpp
            .unwrap_or(self.h * self.h / (spec.dim as f64 * spec.ell.big_lam()))
    }

    /// `1e-7 ell` unless set.
    pub fn tol(&self, spec: &ProblemSpec) -> f64 {
        self.tol.unwrap_or(1e-7 * spec.ell_estimate)
    }

    /// `50 diam(D)^2 / lam` unless set.
    pub fn max_time(&self, spec: &ProblemSpec) -> f64 {
        self.max_time
            .unwrap_or(50.0 * spec.domain.diameter().powi(2) / spec.ell.lam())
    }

    /// The constant control for `mc_fixed_control`, `sqrt(lam) I` by default.
    pub fn control(&self, spec: &ProblemSpec) -> Result<Control, ConfigError> {
        match &self.sigma {
            None => Ok(Control::scaled_identity(spec.dim, spec.ell.lam())),
            Some(s) => {
                let c = Control::from_sigma(spec.dim, s.clone())
                    .map_err(|e| invalid("solver.sigma", e.to_string()))?;
                c.validate(spec.ell)
                    .map_err(|e| invalid("solver.sigma", e.to_string()))?;
                Ok(c)
            }
        }
    }
}

/// Reference text for `--print-defaults`.
pub const DEFAULTS_TEXT: &str = r#"# pucci-kac configuration keys and defaults

[problem]
dim = 2                  # required, 1..=16 (grid solvers 1..=3, fd_oracle 2)
lam = 1.0                # required, 0 < lam <= Lam
Lam = 1.0                # required
f = "0"                  # required, expression in x1..xN, r
g = "0"                  # required
domain = "ball"          # required: ball | box | annulus
center = [0.0, 0.0]      # ball, annulus
radius = 1.0             # ball
# lo = [0.0, 0.0]        # box
# hi = [1.0, 1.0]        # box
# r_inner = 0.5          # annulus
# r_outer = 1.0          # annulus

[solver]
kind = "dpp_grid"        # mc_fixed_control | dpp_grid | fd_oracle | cross_check
dt = 0.001               # Monte Carlo time step
n_paths = 10000          # Monte Carlo paths per point
h = 0.05                 # lattice spacing
# dt_dpp = h^2/(N Lam)   # DPP step
angles = 16              # control enumeration: rotation angles (N = 2)
levels = 3               # control enumeration: eigenvalue levels
stencil_angles = 8       # fd_oracle angle count K
stencil_radius = 3       # fd_oracle stencil radius W (Chebyshev)
reach = "2"              # DPP arm length in cells, or "diffusive"
method = "policy_iteration"  # DPP: policy_iteration | value_iteration
# tol = 1e-7 * ell       # solver tolerance
max_iter = 100000        # solver iteration cap
# max_time = 50 diam^2/lam   # path censoring horizon
seed = 0                 # master seed for all randomness
exit_refinement = "brownian_bridge"  # none | segment_projection | brownian_bridge
# sigma = [[1.0, 0.0], [0.0, 1.0]]   # mc_fixed_control control, default sqrt(lam) I
# eval_points = [[0.0, 0.0]]         # default: bounding-box midpoint
output = "out"           # output directory
# threads = 1            # worker threads (else PUCCI_KAC_THREADS, else all cores)
# exact = "..."          # reference solution for error columns
certify = false          # Monte Carlo check of the extracted grid policy
"#;

/// Reads and validates a config file.
pub fn load_config(path: &Path) -> Result<(ProblemSpec, RunConfig), ConfigError> {
    let text = fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<(ProblemSpec, RunConfig), ConfigError> {
    let raw: RawFile = toml::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
    let spec = validate_problem(&raw.problem)?;
    let cfg = validate_solver(&raw.solver, &spec)?;
    Ok((spec, cfg))
}

fn finite(key: &str, v: f64) -> Result<f64, ConfigError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(invalid(key, "must be finite"))
    }
}

fn positive(key: &str, v: f64) -> Result<f64, ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(invalid(key, format!("must be positive and finite (got {v})")))
    }
}

fn point(key: &str, v: &Option<Vec<f64>>, dim: usize) -> Result<Vec<f64>, ConfigError> {
    let v = v.as_ref().ok_or_else(|| invalid(key, "required for this domain"))?;
    if v.len() != dim {
        return Err(invalid(key, format!("expected {dim} coordinates, got {}", v.len())));
    }
    for &c in v {
        finite(key, c)?;
    }
    Ok(v.clone())
}

fn scalar(key: &str, v: Option<f64>) -> Result<f64, ConfigError> {
    v.ok_or_else(|| invalid(key, "required for this domain"))
}

fn validate_problem(p: &RawProblem) -> Result<ProblemSpec, ConfigError> {
    if p.dim == 0 || p.dim > MAX_DIM {
        return Err(invalid("problem.dim", format!("must be in 1..={MAX_DIM}")));
    }
    positive("problem.lam", p.lam)?;
    positive("problem.Lam", p.big_lam)?;
    if p.lam > p.big_lam {
        return Err(invalid(
            "problem.lam, problem.Lam",
            format!("need lam <= Lam (got lam = {}, Lam = {})", p.lam, p.big_lam),
        ));
    }
    let ell = Ellipticity::new(p.lam, p.big_lam).map_err(|e| invalid("problem.lam, problem.Lam", e.to_string()))?;
    let dim = p.dim;
    let unused = |keys: &[(&str, bool)]| -> Result<(), ConfigError> {
        for (k, present) in keys {
            if *present {
                return Err(invalid(k, format!("not a parameter of domain `{}`", p.domain)));
            }
        }
        Ok(())
    };
    let domain = match p.domain.as_str() {
        "ball" => {
            unused(&[
                ("problem.lo", p.lo.is_some()),
                ("problem.hi", p.hi.is_some()),
                ("problem.r_inner", p.r_inner.is_some()),
                ("problem.r_outer", p.r_outer.is_some()),
            ])?;
            Domain::ball(point("problem.center", &p.center, dim)?, scalar("problem.radius", p.radius)?)
                .map_err(|e| invalid("problem.radius", e.to_string()))?
        }
        "box" => {
            unused(&[
                ("problem.center", p.center.is_some()),
                ("problem.radius", p.radius.is_some()),
                ("problem.r_inner", p.r_inner.is_some()),
                ("problem.r_outer", p.r_outer.is_some()),
            ])?;
            Domain::cube(point("problem.lo", &p.lo, dim)?, point("problem.hi", &p.hi, dim)?)
                .map_err(|e| invalid("problem.lo, problem.hi", e.to_string()))?
        }
        "annulus" => {
            unused(&[
                ("problem.radius", p.radius.is_some()),
                ("problem.lo", p.lo.is_some()),
                ("problem.hi", p.hi.is_some()),
            ])?;
            Domain::annulus(
                point("problem.center", &p.center, dim)?,
                scalar("problem.r_inner", p.r_inner)?,
                scalar("problem.r_outer", p.r_outer)?,
            )
            .map_err(|e| invalid("problem.r_inner, problem.r_outer", e.to_string()))?
        }
        other => {
            return Err(invalid(
                "problem.domain",
                format!("unknown domain `{other}` (ball, box, annulus)"),
            ))
        }
    };
    let f = ScalarField::parse(&p.f, dim).map_err(|source| ConfigError::Expression {
        key: "problem.f".into(),
        source,
    })?;
    let g = ScalarField::parse(&p.g, dim).map_err(|source| ConfigError::Expression {
        key: "problem.g".into(),
        source,
    })?;
    let ell_estimate = estimate_ell(&domain, &f, &g);
    Ok(ProblemSpec {
        dim,
        ell,
        domain,
        f,
        g,
        ell_estimate,
    })
}

const PRIMES: [u32; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

fn radical_inverse(mut i: u64, base: u32) -> f64 {
    let b = base as u64;
    let mut inv = 1.0 / base as f64;
    let mut out = 0.0;
    while i > 0 {
        out += (i % b) as f64 * inv;
        i /= b;
        inv /= base as f64;
    }
    out
}

/// `max(|f|, |g|)` over Halton points of the bounding box lying in the
/// closed domain.
pub fn estimate_ell(domain: &Domain, f: &ScalarField, g: &ScalarField) -> f64 {
    let (lo, hi) = domain.bounding_box();
    let dim = lo.len();
    let mut x = vec![0.0; dim];
    let mut ell: f64 = 0.0;
    for i in 1..=ELL_SAMPLES as u64 {
        for k in 0..dim {
            x[k] = lo[k] + (hi[k] - lo[k]) * radical_inverse(i, PRIMES[k]);
        }
        if domain.in_closure(&x) {
            ell = ell.max(f.at(&x).abs()).max(g.at(&x).abs());
        }
    }
    ell.max(ELL_FLOOR)
}

fn expr(key: &str, text: &str, dim: usize) -> Result<ScalarField, ConfigError> {
    ScalarField::parse(text, dim).map_err(|source| ConfigError::Expression {
        key: key.into(),
        source,
    })
}

fn validate_solver(s: &RawSolver, spec: &ProblemSpec) -> Result<RunConfig, ConfigError> {
    let dim = spec.dim;
    let solver = match &s.kind {
        None => SolverKind::DppGrid,
        Some(k) => SolverKind::parse(k).ok_or_else(|| {
            invalid(
                "solver.kind",
                format!("unknown solver `{k}` (mc_fixed_control, dpp_grid, fd_oracle, cross_check)"),
            )
        })?,
    };
    match solver {
        SolverKind::DppGrid if dim > 3 => {
            return Err(invalid("solver.kind", "grid solvers support dim <= 3"))
        }
        SolverKind::FdOracle | SolverKind::CrossCheck if dim != 2 => {
            return Err(invalid("solver.kind", "fd_oracle requires dim = 2"))
        }
        _ => {}
    }
    let dt = positive("solver.dt", s.dt.unwrap_or(1e-3))?;
    let n_paths = s.n_paths.unwrap_or(10_000);
    if n_paths < 2 {
        return Err(invalid("solver.n_paths", "must be at least 2"));
    }
    let h = positive("solver.h", s.h.unwrap_or(0.05))?;
    let dt_dpp = s.dt_dpp.map(|v| positive("solver.dt_dpp", v)).transpose()?;
    let angles = s.angles.unwrap_or(16);
    if angles == 0 {
        return Err(invalid("solver.angles", "must be at least 1"));
    }
    let levels = s.levels.unwrap_or(3);
    if levels < 2 {
        return Err(invalid("solver.levels", "must be at least 2"));
    }
    let stencil_angles = s.stencil_angles.unwrap_or(8);
    if stencil_angles == 0 {
        return Err(invalid("solver.stencil_angles", "must be at least 1"));
    }
    let stencil_radius = s.stencil_radius.unwrap_or(3);
    if stencil_radius < 1 {
        return Err(invalid("solver.stencil_radius", "must be at least 1"));
    }
    let reach = match s.reach.as_deref() {
        None => StencilReach::default(),
        Some("diffusive") => StencilReach::Diffusive,
        Some(m) => match m.parse::<u32>() {
            Ok(m) if m >= 1 => StencilReach::Cells(m),
            _ => return Err(invalid("solver.reach", "expected a positive cell count or \"diffusive\"")),
        },
    };
    let method = match s.method.as_deref() {
        None | Some("policy_iteration") => SolveMethod::PolicyIteration,
        Some("value_iteration") => SolveMethod::ValueIteration,
        Some(other) => {
            return Err(invalid(
                "solver.method",
                format!("unknown method `{other}` (policy_iteration, value_iteration)"),
            ))
        }
    };
    let tol = s.tol.map(|v| positive("solver.tol", v)).transpose()?;
    let max_iter = s.max_iter.unwrap_or(100_000);
    if max_iter == 0 {
        return Err(invalid("solver.max_iter", "must be at least 1"));
    }
    let max_time = s.max_time.map(|v| positive("solver.max_time", v)).transpose()?;
    if let Some(t) = max_time {
        if t < dt {
            return Err(invalid("solver.max_time", "must be at least solver.dt"));
        }
    }
    let exit_refinement = match s.exit_refinement.as_deref() {
        None => ExitRefinement::default(),
        Some(r) => ExitRefinement::parse(r).ok_or_else(|| {
            invalid(
                "solver.exit_refinement",
                "expected none, segment_projection or brownian_bridge",
            )
        })?,
    };
    let sigma = match &s.sigma {
        None => None,
        Some(rows) => {
            if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
                return Err(invalid("solver.sigma", format!("expected a {dim}x{dim} matrix")));
            }
            Some(rows.concat())
        }
    };
    let (lo, hi) = spec.domain.bounding_box();
    let eval_points = match &s.eval_points {
        None => vec![lo.iter().zip(&hi).map(|(a, b)| 0.5 * (a + b)).collect()],
        Some(pts) => {
            for (i, p) in pts.iter().enumerate() {
                let key = format!("solver.eval_points[{i}]");
                if p.len() != dim {
                    return Err(invalid(&key, format!("expected {dim} coordinates")));
                }
                if p.iter().zip(lo.iter().zip(&hi)).any(|(x, (a, b))| !(x >= a && x <= b)) {
                    return Err(invalid(&key, "outside the domain's bounding box"));
                }
            }
            if pts.is_empty() {
                return Err(invalid("solver.eval_points", "must not be empty"));
            }
            pts.clone()
        }
    };
    if let Some(t) = s.threads {
        if t == 0 {
            return Err(invalid("solver.threads", "must be at least 1"));
        }
    }
    let exact = s.exact.as_deref().map(|e| expr("solver.exact", e, dim)).transpose()?;
    let cfg = RunConfig {
        solver,
        dt,
        n_paths,
        h,
        dt_dpp,
        angles,
        levels,
        stencil_angles,
        stencil_radius,
        reach,
        method,
        tol,
        max_iter,
        max_time,
        seed: s.seed.unwrap_or(0),
        exit_refinement,
        sigma,
        eval_points,
        output: PathBuf::from(s.output.as_deref().unwrap_or("out")),
        threads: s.threads,
        exact,
        certify: s.certify.unwrap_or(false),
    };
    cfg.control(spec)?;
    Ok(cfg)
}

/// Canonical TOML for a validated config: every key explicit except those
/// whose default depends on the problem and was not set.
pub fn to_canonical_toml(spec: &ProblemSpec, cfg: &RunConfig) -> String {
    let mut problem = RawProblem {
        dim: spec.dim,
        lam: spec.ell.lam(),
        big_lam: spec.ell.big_lam(),
        f: spec.f.source().to_string(),
        g: spec.g.source().to_string(),
        domain: spec.domain.kind_name().to_string(),
        ..RawProblem::default()
    };
    match &spec.domain {
        Domain::Ball { center, radius } => {
            problem.center = Some(center.clone());
            problem.radius = Some(*radius);
        }
        Domain::Box { lo, hi } => {
            problem.lo = Some(lo.clone());
            problem.hi = Some(hi.clone());
        }
        Domain::Annulus {
            center,
            r_inner,
            r_outer,
        } => {
            problem.center = Some(center.clone());
            problem.r_inner = Some(*r_inner);
            problem.r_outer = Some(*r_outer);
        }
    }
    let dim = spec.dim;
    let solver = RawSolver {
        kind: Some(cfg.solver.as_str().into()),
        dt: Some(cfg.dt),
        n_paths: Some(cfg.n_paths),
        h: Some(cfg.h),
        dt_dpp: cfg.dt_dpp,
        angles: Some(cfg.angles),
        levels: Some(cfg.levels),
        stencil_angles: Some(cfg.stencil_angles),
        stencil_radius: Some(cfg.stencil_radius),
        reach: Some(match cfg.reach {
            StencilReach::Diffusive => "diffusive".into(),
            StencilReach::Cells(m) => m.to_string(),
        }),
        method: Some(
            match cfg.method {
                SolveMethod::PolicyIteration => "policy_iteration",
                SolveMethod::ValueIteration => "value_iteration",
            }
            .into(),
        ),
        tol: cfg.tol,
        max_iter: Some(cfg.max_iter),
        max_time: cfg.max_time,
        seed: Some(cfg.seed),
        exit_refinement: Some(cfg.exit_refinement.as_str().into()),
        sigma: cfg.sigma.as_ref().map(|s| s.chunks(dim).map(|r| r.to_vec()).collect()),
        eval_points: Some(cfg.eval_points.clone()),
        output: Some(cfg.output.to_string_lossy().into_owned()),
        threads: cfg.threads,
        exact: cfg.exact.as_ref().map(|e| e.source().to_string()),
        certify: Some(cfg.certify),
    };
    toml::to_string(&RawFile { problem, solver }).expect("config serializes")
}
