//! Controlled diffusion paths, exit times, payoffs and Monte Carlo estimates.
//!
//! Every path draws from its own generators, seeded from `(seed, index)`,
//! so a path is the same whichever worker runs it. Results are gathered in
//! index order and reduced with [`pairwise_sum`].

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_pcg::Pcg64Mcg;
use rayon::prelude::*;
use thiserror::Error;

use crate::exprlang::ScalarField;
use crate::geometry::{Domain, GeometryError};
use crate::grid::Lattice;
use crate::stats::{derive_seed, mean_stderr, pairwise_sum};
use crate::symmat::{Control, Ellipticity};

/// Censoring above this fraction attaches a warning to an estimate.
pub const CENSOR_WARN_RATE: f64 = 0.01;

const STREAM_INCREMENTS: u64 = 0;
const STREAM_BRIDGE: u64 = 1;
const STREAM_RESTART: u64 = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("dt must be positive and finite (got {0})")]
    InvalidStep(f64),
    #[error("max_time must be finite and at least dt (dt = {dt}, max_time = {max_time})")]
    InvalidHorizon { dt: f64, max_time: f64 },
    #[error("need at least {min} paths (got {found})")]
    TooFewPaths { min: usize, found: usize },
    #[error("record is censored at max_time; widen the horizon")]
    Censored,
    #[error("all {0} paths were censored")]
    AllCensored(usize),
    #[error("rho_time must be positive (got {0})")]
    InvalidRho(f64),
    #[error("control has dimension {found}, domain has {expected}")]
    Dimension { expected: usize, found: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// How the exit of a discrete walk is located.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExitRefinement {
    /// First lattice-time position outside the domain.
    None,
    /// Boundary crossing on the last segment.
    SegmentProjection,
    /// Segment projection, plus a Brownian-bridge test for excursions that
    /// leave and re-enter within one step.
    #[default]
    BrownianBridge,
}

impl ExitRefinement {
    pub fn as_str(self) -> &'static str {
        match self {
            ExitRefinement::None => "none",
            ExitRefinement::SegmentProjection => "segment_projection",
            ExitRefinement::BrownianBridge => "brownian_bridge",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(ExitRefinement::None),
            "segment_projection" => Some(ExitRefinement::SegmentProjection),
            "brownian_bridge" => Some(ExitRefinement::BrownianBridge),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathConfig {
    dt: f64,
    max_time: f64,
    pub seed: u64,
    pub exit_refinement: ExitRefinement,
}

impl PathConfig {
    pub fn new(dt: f64, max_time: f64, seed: u64) -> Result<Self, SimError> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(SimError::InvalidStep(dt));
        }
        if !(max_time.is_finite() && max_time >= dt) {
            return Err(SimError::InvalidHorizon { dt, max_time });
        }
        Ok(PathConfig {
            dt,
            max_time,
            seed,
            exit_refinement: ExitRefinement::default(),
        })
    }

    pub fn with_refinement(mut self, r: ExitRefinement) -> Self {
        self.exit_refinement = r;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn max_time(&self) -> f64 {
        self.max_time
    }

    /// `50 diam(D)^2 / lam`.
    pub fn default_max_time(domain: &Domain, ell: Ellipticity) -> f64 {
        50.0 * domain.diameter().powi(2) / ell.lam()
    }
}

/// One simulated trajectory up to its exit.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitRecord {
    pub tau: f64,
    pub exit_point: Vec<f64>,
    /// Left-Riemann `int_0^tau f(X_t) dt`.
    pub f_integral: f64,
    pub censored: bool,
    pub steps: u64,
}

/// Control lookup through a lattice: each position reads the control of
/// its nearest node.
#[derive(Debug, Clone)]
pub struct FeedbackPolicy {
    lattice: Lattice,
    table: Vec<u32>,
    controls: Vec<Control>,
}

impl FeedbackPolicy {
    /// `table[node]` indexes `controls`; its length must match the lattice.
    pub fn new(lattice: Lattice, table: Vec<u32>, controls: Vec<Control>) -> Self {
        assert_eq!(table.len(), lattice.len(), "one control index per node");
        assert!(
            table.iter().all(|&k| (k as usize) < controls.len()),
            "control index out of range"
        );
        FeedbackPolicy {
            lattice,
            table,
            controls,
        }
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn table(&self) -> &[u32] {
        &self.table
    }

    pub fn controls(&self) -> &[Control] {
        &self.controls
    }
}

#[derive(Debug, Clone)]
pub enum Policy {
    Constant(Control),
    Feedback(FeedbackPolicy),
}

impl Policy {
    #[inline]
    pub fn control_at(&self, x: &[f64]) -> &Control {
        match self {
            Policy::Constant(c) => c,
            Policy::Feedback(fb) => &fb.controls[fb.table[fb.lattice.nearest(x)] as usize],
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Policy::Constant(c) => c.dim(),
            Policy::Feedback(fb) => fb.lattice.dim(),
        }
    }
}

/// The two generators of one path: Gaussian increments, and the uniforms
/// used by the bridge test (drawn every step in bridge mode so that paths
/// started from different points stay aligned).
#[derive(Debug, Clone)]
pub struct PathRng {
    increments: Pcg64Mcg,
    bridge: Pcg64Mcg,
}

impl PathRng {
    pub fn for_path(master: u64, index: u64) -> Self {
        PathRng {
            increments: Pcg64Mcg::seed_from_u64(derive_seed(master, index, STREAM_INCREMENTS)),
            bridge: Pcg64Mcg::seed_from_u64(derive_seed(master, index, STREAM_BRIDGE)),
        }
    }

    /// Generators for the independent continuation of a restarted path.
    fn restart(master: u64, index: u64) -> Self {
        let seed = derive_seed(master, index, STREAM_RESTART);
        PathRng::for_path(seed, 0)
    }

    fn normal(&mut self) -> f64 {
        self.increments.sample(StandardNormal)
    }

    fn uniform(&mut self) -> f64 {
        self.bridge.random::<f64>()
    }
}

/// `sigma sqrt(dt) xi` with `xi` standard normal.
pub fn gaussian_increment(sigma: &Control, dt: f64, rng: &mut PathRng) -> Vec<f64> {
    let n = sigma.dim();
    let xi: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    let mut out = vec![0.0; n];
    sigma.apply(&xi, &mut out);
    let s = dt.sqrt();
    out.iter_mut().for_each(|v| *v *= s);
    out
}

enum Stop {
    Exited,
    Horizon,
}

struct WalkEnd {
    t: f64,
    integral: f64,
    steps: u64,
    stop: Stop,
}

/// Advances `x` from time `t0` until exit or `horizon`. Increments are drawn
/// exactly as [`gaussian_increment`] would.
fn walk(
    x: &mut [f64],
    t0: f64,
    horizon: f64,
    policy: &Policy,
    domain: &Domain,
    running: &dyn Fn(&[f64]) -> f64,
    cfg: &PathConfig,
    rng: &mut PathRng,
) -> WalkEnd {
    let n = x.len();
    let mut t = t0;
    let mut integral = 0.0;
    let mut steps = 0u64;
    let mut xi = vec![0.0; n];
    let mut y = vec![0.0; n];
    let mut mid = vec![0.0; n];
    let bridge = cfg.exit_refinement == ExitRefinement::BrownianBridge;
    loop {
        let remaining = horizon - t;
        if remaining <= 1e-12 * horizon.max(1.0) {
            return WalkEnd {
                t: horizon,
                integral,
                steps,
                stop: Stop::Horizon,
            };
        }
        let step = if remaining < cfg.dt * (1.0 + 1e-9) {
            remaining
        } else {
            cfg.dt
        };
        let ctrl = policy.control_at(x);
        for v in xi.iter_mut() {
            *v = rng.normal();
        }
        let u = if bridge { rng.uniform() } else { 1.0 };
        ctrl.apply(&xi, &mut y);
        let s = step.sqrt();
        for i in 0..n {
            y[i] = x[i] + s * y[i];
        }
        let fx = running(x);
        steps += 1;
        if !domain.inside(&y) {
            let theta = match cfg.exit_refinement {
                ExitRefinement::None => {
                    x.copy_from_slice(&y);
                    1.0
                }
                _ => {
                    let hit = domain.segment_exit(x, &y);
                    x.copy_from_slice(&hit.point);
                    hit.t
                }
            };
            return WalkEnd {
                t: t + theta * step,
                integral: integral + theta * step * fx,
                steps,
                stop: Stop::Exited,
            };
        }
        if bridge {
            let d0 = domain.boundary_distance(x);
            let d1 = domain.boundary_distance(&y);
            let a = ctrl.diffusion();
            // n^T A n <= tr(A): skip the normal computation when the crossing
            // probability is negligible anyway
            let bound = 2.0 * d0 * d1 / (a.trace() * step);
            if bound < 40.0 {
                for i in 0..n {
                    mid[i] = 0.5 * (x[i] + y[i]);
                }
                let (foot, normal) = domain.closest_boundary_point(&mid);
                let v = a.quadratic_form(&normal) * step;
                let p = (-2.0 * d0 * d1 / v).exp();
                if u < p {
                    x.copy_from_slice(&foot);
                    return WalkEnd {
                        t: t + 0.5 * step,
                        integral: integral + 0.5 * step * fx,
                        steps,
                        stop: Stop::Exited,
                    };
                }
            }
        }
        integral += step * fx;
        t += step;
        x.copy_from_slice(&y);
    }
}

/// Runs one path from `x` until it leaves `domain` or reaches `max_time`.
pub fn simulate_exit(
    x: &[f64],
    policy: &Policy,
    domain: &Domain,
    f: &ScalarField,
    cfg: &PathConfig,
    rng: &mut PathRng,
) -> ExitRecord {
    simulate_with(x, policy, domain, &|p| f.at(p), cfg, rng)
}

fn simulate_with(
    x: &[f64],
    policy: &Policy,
    domain: &Domain,
    running: &dyn Fn(&[f64]) -> f64,
    cfg: &PathConfig,
    rng: &mut PathRng,
) -> ExitRecord {
    if !domain.inside(x) {
        return ExitRecord {
            tau: 0.0,
            exit_point: x.to_vec(),
            f_integral: 0.0,
            censored: false,
            steps: 0,
        };
    }
    let mut pos = x.to_vec();
    let end = walk(&mut pos, 0.0, cfg.max_time, policy, domain, running, cfg, rng);
    ExitRecord {
        tau: end.t,
        exit_point: pos,
        f_integral: end.integral,
        censored: matches!(end.stop, Stop::Horizon),
        steps: end.steps,
    }
}

/// `g(X_tau) + int_0^tau f`.
pub fn payoff(rec: &ExitRecord, g: &ScalarField) -> Result<f64, SimError> {
    if rec.censored {
        return Err(SimError::Censored);
    }
    Ok(g.at(&rec.exit_point) + rec.f_integral)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub censor_rate: f64,
    pub n_paths: usize,
    pub warning: Option<String>,
}

fn check_inputs(x: &[f64], policy: &Policy, domain: &Domain) -> Result<(), SimError> {
    domain.check_point(x)?;
    if policy.dim() != domain.dim() {
        return Err(SimError::Dimension {
            expected: domain.dim(),
            found: policy.dim(),
        });
    }
    Ok(())
}

fn summarize(payoffs: Vec<Option<f64>>) -> Result<ValueEstimate, SimError> {
    let n = payoffs.len();
    let kept: Vec<f64> = payoffs.into_iter().flatten().collect();
    if kept.is_empty() {
        return Err(SimError::AllCensored(n));
    }
    let censor_rate = (n - kept.len()) as f64 / n as f64;
    let (mean, stderr) = mean_stderr(&kept);
    let warning = (censor_rate > CENSOR_WARN_RATE).then(|| {
        format!(
            "{:.2}% of paths censored at max_time",
            100.0 * censor_rate
        )
    });
    Ok(ValueEstimate {
        mean,
        stderr,
        censor_rate,
        n_paths: n,
        warning,
    })
}

/// Mean payoff and its standard error over `n_paths` independent paths.
/// Censored paths are excluded from the mean and counted in `censor_rate`.
pub fn estimate_value(
    x: &[f64],
    policy: &Policy,
    domain: &Domain,
    f: &ScalarField,
    g: &ScalarField,
    n_paths: usize,
    cfg: &PathConfig,
) -> Result<ValueEstimate, SimError> {
    check_inputs(x, policy, domain)?;
    if n_paths < 2 {
        return Err(SimError::TooFewPaths {
            min: 2,
            found: n_paths,
        });
    }
    let payoffs: Vec<Option<f64>> = (0..n_paths as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = PathRng::for_path(cfg.seed, i);
            let rec = simulate_exit(x, policy, domain, f, cfg, &mut rng);
            payoff(&rec, g).ok()
        })
        .collect();
    summarize(payoffs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExitTimeStats {
    /// Mean exit time with censored paths counted at `max_time`.
    pub mean_tau: f64,
    pub stderr: f64,
    pub censor_rate: f64,
    /// `(T, P(tau >= T))` on a geometric grid around the mean.
    pub tail: Vec<(f64, f64)>,
    /// Diagnostic scale `diam(D)^2 / lam`.
    pub bound: f64,
    sorted: Vec<f64>,
}

impl ExitTimeStats {
    /// Empirical `P(tau >= t)`.
    pub fn survival(&self, t: f64) -> f64 {
        let below = self.sorted.partition_point(|&s| s < t);
        (self.sorted.len() - below) as f64 / self.sorted.len() as f64
    }

    pub fn within_bound(&self) -> bool {
        self.mean_tau <= self.bound
    }
}

/// Exit-time moments and survival probabilities from `x`.
pub fn exit_time_stats(
    x: &[f64],
    policy: &Policy,
    domain: &Domain,
    ell: Ellipticity,
    cfg: &PathConfig,
    n_paths: usize,
) -> Result<ExitTimeStats, SimError> {
    check_inputs(x, policy, domain)?;
    if n_paths < 1000 {
        return Err(SimError::TooFewPaths {
            min: 1000,
            found: n_paths,
        });
    }
    let zero = |_: &[f64]| 0.0;
    let recs: Vec<(f64, bool)> = (0..n_paths as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = PathRng::for_path(cfg.seed, i);
            let r = simulate_with(x, policy, domain, &zero, cfg, &mut rng);
            (r.tau, r.censored)
        })
        .collect();
    let taus: Vec<f64> = recs.iter().map(|r| r.0).collect();
    let censored = recs.iter().filter(|r| r.1).count();
    let (mean_tau, stderr) = mean_stderr(&taus);
    let mut sorted = taus;
    sorted.sort_by(f64::total_cmp);
    let scale = if mean_tau > 0.0 { mean_tau } else { cfg.dt };
    let mut stats = ExitTimeStats {
        mean_tau,
        stderr,
        censor_rate: censored as f64 / n_paths as f64,
        tail: Vec::new(),
        bound: domain.diameter().powi(2) / ell.lam(),
        sorted,
    };
    stats.tail = (-3..=5)
        .map(|j| {
            let t = scale * 2f64.powi(j);
            (t, stats.survival(t))
        })
        .collect();
    Ok(stats)
}

/// Fraction of coupled path pairs whose exit times from `x` and `y` differ
/// by more than `alpha`. Both walks of a pair read the same generators.
pub fn continuity_probe(
    x: &[f64],
    y: &[f64],
    policy: &Policy,
    domain: &Domain,
    cfg: &PathConfig,
    n_paths: usize,
    alpha: f64,
) -> Result<f64, SimError> {
    check_inputs(x, policy, domain)?;
    domain.check_point(y)?;
    if n_paths == 0 {
        return Err(SimError::TooFewPaths { min: 1, found: 0 });
    }
    let zero = |_: &[f64]| 0.0;
    let hits: Vec<f64> = (0..n_paths as u64)
        .into_par_iter()
        .map(|i| {
            let mut rx = PathRng::for_path(cfg.seed, i);
            let mut ry = PathRng::for_path(cfg.seed, i);
            let a = simulate_with(x, policy, domain, &zero, cfg, &mut rx);
            let b = simulate_with(y, policy, domain, &zero, cfg, &mut ry);
            if (a.tau - b.tau).abs() > alpha {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Ok(pairwise_sum(&hits) / n_paths as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RestartComparison {
    pub direct: ValueEstimate,
    pub split: ValueEstimate,
    /// Standard error of `direct - split` from the paired differences.
    pub paired_stderr: f64,
}

impl RestartComparison {
    /// `sqrt(se_direct^2 + se_split^2)`.
    pub fn joint_stderr(&self) -> f64 {
        self.direct.stderr.hypot(self.split.stderr)
    }

    pub fn gap(&self) -> f64 {
        (self.direct.mean - self.split.mean).abs()
    }
}

/// Compares the direct estimate with one that stops each path at
/// `min(rho_time, tau)`, then restarts an independent path from the stopped
/// state with the remaining horizon.
///
/// The first leg of each split path reuses the direct path's generators, so
/// the two estimates are coupled up to the restart and independent after it.
#[allow(clippy::too_many_arguments)]
pub fn restart_consistency(
    x: &[f64],
    policy: &Policy,
    domain: &Domain,
    f: &ScalarField,
    g: &ScalarField,
    rho_time: f64,
    cfg: &PathConfig,
    n_paths: usize,
) -> Result<RestartComparison, SimError> {
    check_inputs(x, policy, domain)?;
    if rho_time.is_nan() || rho_time < 0.0 {
        return Err(SimError::InvalidRho(rho_time));
    }
    if n_paths < 2 {
        return Err(SimError::TooFewPaths {
            min: 2,
            found: n_paths,
        });
    }
    let running = |p: &[f64]| f.at(p);
    let pairs: Vec<(Option<f64>, Option<f64>)> = (0..n_paths as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = PathRng::for_path(cfg.seed, i);
            let direct = simulate_exit(x, policy, domain, f, cfg, &mut rng);
            let direct = payoff(&direct, g).ok();

            let split = if !domain.inside(x) {
                Some(g.at(x))
            } else {
                let mut pos = x.to_vec();
                let mut rng = PathRng::for_path(cfg.seed, i);
                let horizon = rho_time.min(cfg.max_time);
                let first = if horizon > 0.0 {
                    walk(&mut pos, 0.0, horizon, policy, domain, &running, cfg, &mut rng)
                } else {
                    WalkEnd {
                        t: 0.0,
                        integral: 0.0,
                        steps: 0,
                        stop: Stop::Horizon,
                    }
                };
                match first.stop {
                    Stop::Exited => Some(g.at(&pos) + first.integral),
                    Stop::Horizon if first.t >= cfg.max_time => None,
                    Stop::Horizon => {
                        let mut rest = PathRng::restart(cfg.seed, i);
                        let end = walk(
                            &mut pos,
                            first.t,
                            cfg.max_time,
                            policy,
                            domain,
                            &running,
                            cfg,
                            &mut rest,
                        );
                        match end.stop {
                            Stop::Exited => Some(g.at(&pos) + first.integral + end.integral),
                            Stop::Horizon => None,
                        }
                    }
                }
            };
            (direct, split)
        })
        .collect();
    let diffs: Vec<f64> = pairs
        .iter()
        .filter_map(|(a, b)| Some(a.as_ref()? - b.as_ref()?))
        .collect();
    let paired_stderr = if diffs.len() >= 2 {
        mean_stderr(&diffs).1
    } else {
        f64::NAN
    };
    let (direct, split): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    Ok(RestartComparison {
        direct: summarize(direct)?,
        split: summarize(split)?,
        paired_stderr,
    })
}
