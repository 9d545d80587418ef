//! Semi-Lagrangian dynamic-programming solver on a [`ValueGrid`].
//!
//! Over one short step `dt` a diffusion with covariance `A dt` is replaced by
//! jumps along the spectral columns `sqrt(e_k) q_k` of `A`. Each column
//! contributes a pair of arms `x + a_+ q` and `x - a_- q`, weighted
//!
//! ```text
//! p_(+/-) = dt e / (a_(+/-) (a_+ + a_-))
//! ```
//!
//! which reproduces the first two moments of the increment. Arm values come
//! from multilinear interpolation over interior nodes, or from `g` where an
//! arm is cut short by the boundary. The discrete generator at `x` is
//!
//! ```text
//! G_A(x) = dt f(x) + sum p (u(arm) - u(x))
//! ```
//!
//! and the solution satisfies `max_A G_A = 0` at every interior node.

use std::fmt;

use rayon::prelude::*;
use thiserror::Error;

use crate::exprlang::ScalarField;
use crate::geometry::Domain;
use crate::grid::{GridError, NodeKind, ValueGrid};
use crate::linsolve::{LinError, SparseSystem};
use crate::simulate::{estimate_value, FeedbackPolicy, PathConfig, Policy, SimError, ValueEstimate};
use crate::symmat::{eigen, ControlSet, SymError};

/// Relative slack under which two control values count as tied.
const TIE: f64 = 1e-10;
/// Outer iterations allowed for policy iteration, whatever `max_iter` says.
const MAX_POLICY_ROUNDS: usize = 1000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DppError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Sym(#[from] SymError),
    #[error(transparent)]
    Linear(#[from] LinError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("dimension mismatch between grid ({grid}) and {what} ({found})")]
    Dimension {
        grid: usize,
        what: &'static str,
        found: usize,
    },
    #[error("dt_dpp must be positive and finite (got {0})")]
    InvalidStep(f64),
    #[error("tolerance must be positive (got {0})")]
    InvalidTolerance(f64),
    #[error("stencil reach must be at least one cell (got {0})")]
    InvalidReach(u32),
    #[error("quadrature point {point:?} lies outside the grid cover")]
    OutsideCover { point: Vec<f64> },
}

/// Arm length of the quadrature stencil.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StencilReach {
    /// `a = sqrt(N dt e)`: the plain 2N-point rule with weights `1/(2N)`.
    Diffusive,
    /// `a = m h` for every column, independent of `dt`.
    Cells(u32),
}

impl Default for StencilReach {
    fn default() -> Self {
        StencilReach::Cells(2)
    }
}

impl fmt::Display for StencilReach {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StencilReach::Diffusive => write!(f, "diffusive"),
            StencilReach::Cells(m) => write!(f, "cells({m})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SolveMethod {
    /// Freeze the maximizer, solve the linear system, repeat.
    #[default]
    PolicyIteration,
    /// Jacobi fixed-point sweeps of the update.
    ValueIteration,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DppOptions {
    pub dt: f64,
    pub reach: StencilReach,
    pub tol: f64,
    pub max_iter: usize,
    pub method: SolveMethod,
    /// Starting value at interior nodes.
    pub init: f64,
}

impl DppOptions {
    /// `dt = h^2 / (N Lam)`, two-cell reach, policy iteration from zero.
    pub fn new(h: f64, dim: usize, big_lam: f64) -> Self {
        DppOptions {
            dt: h * h / (dim as f64 * big_lam),
            reach: StencilReach::default(),
            tol: 1e-7,
            max_iter: 100_000,
            method: SolveMethod::default(),
            init: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    /// Sweeps (value iteration) or policy rounds (policy iteration).
    pub iterations: usize,
    /// Sup-norm of the value-iteration update at the returned grid.
    pub final_residual: f64,
    pub dt_dpp: f64,
    pub converged: bool,
    /// Residual after each iteration.
    pub residuals: Vec<f64>,
    /// Value iteration only: no interior value ever decreased.
    pub monotone: bool,
}

#[derive(Debug, Clone, Copy)]
struct Arm {
    /// `1 / (a (a_+ + a_-))`.
    coef: f64,
    /// Boundary value when the arm ends on the boundary, otherwise NaN.
    fixed: f64,
    start: u32,
    len: u32,
}

impl Arm {
    #[inline]
    fn value(&self, u: &[f64], pool: &[(u32, f64)]) -> f64 {
        if self.len == 0 {
            return self.fixed;
        }
        pool[self.start as usize..(self.start + self.len) as usize]
            .iter()
            .map(|&(k, w)| w * u[k as usize])
            .sum()
    }
}

#[derive(Debug, Clone)]
struct Column {
    key: usize,
    e: f64,
}

/// Precomputed stencil geometry for a grid, domain and control set.
#[derive(Debug, Clone)]
pub struct DppScheme {
    dim: usize,
    dt: f64,
    n_keys: usize,
    /// Per control, its spectral columns.
    controls: Vec<Vec<Column>>,
    /// `arms[(unknown * n_keys + key) * 2 + side]`.
    arms: Vec<Arm>,
    pool: Vec<(u32, f64)>,
    /// `dt f(x)` per unknown.
    source: Vec<f64>,
    /// Per unknown, `max(1, max_A sum p)`.
    kappa: Vec<f64>,
}

fn canonical_direction(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
        if *first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
    // exact axis directions keep arms on lattice lines
    for x in v.iter_mut() {
        if x.abs() < 1e-14 {
            *x = 0.0;
        } else if (x.abs() - 1.0).abs() < 1e-14 {
            *x = x.signum();
        }
    }
    v
}

impl DppScheme {
    pub fn new(
        grid: &ValueGrid,
        domain: &Domain,
        controls: &ControlSet,
        f: &ScalarField,
        g: &ScalarField,
        opts: &DppOptions,
    ) -> Result<Self, DppError> {
        let lattice = grid.lattice();
        let dim = lattice.dim();
        for (what, found) in [
            ("domain", domain.dim()),
            ("controls", controls.dim()),
            ("f", f.dim()),
            ("g", g.dim()),
        ] {
            if found != dim {
                return Err(DppError::Dimension {
                    grid: dim,
                    what,
                    found,
                });
            }
        }
        if !(opts.dt > 0.0 && opts.dt.is_finite()) {
            return Err(DppError::InvalidStep(opts.dt));
        }
        if let StencilReach::Cells(m) = opts.reach {
            if m == 0 {
                return Err(DppError::InvalidReach(m));
            }
        }
        let h = lattice.h();

        // direction/reach catalog
        let mut keys: Vec<(Vec<f64>, f64)> = Vec::new();
        let mut cols_per_control = Vec::with_capacity(controls.len());
        for c in controls.controls() {
            let eig = eigen(c.diffusion())?;
            let mut cols = Vec::with_capacity(dim);
            for (k, &e) in eig.values.iter().enumerate() {
                let e = e.max(0.0);
                let dir = canonical_direction(eig.vector(k));
                let reach = match opts.reach {
                    StencilReach::Diffusive => (dim as f64 * opts.dt * e).sqrt(),
                    StencilReach::Cells(m) => m as f64 * h,
                };
                let key = match keys.iter().position(|(d, r)| {
                    (r - reach).abs() <= 1e-12 * reach
                        && d.iter().zip(&dir).all(|(a, b)| (a - b).abs() <= 1e-9)
                }) {
                    Some(i) => i,
                    None => {
                        keys.push((dir, reach));
                        keys.len() - 1
                    }
                };
                cols.push(Column { key, e });
            }
            cols_per_control.push(cols);
        }
        let n_keys = keys.len();

        let interior = grid.interior_nodes();
        let per_node: Vec<Result<(Vec<Arm>, Vec<(u32, f64)>), DppError>> = interior
            .par_iter()
            .map(|&node| {
                let x = lattice.point(node);
                let mut arms = Vec::with_capacity(2 * n_keys);
                let mut pool = Vec::new();
                let mut y = vec![0.0; dim];
                for (dir, reach) in &keys {
                    let mut lens = [0.0; 2];
                    let mut targets: [Option<(f64, Vec<(u32, f64)>)>; 2] = [None, None];
                    for (side, sign) in [1.0f64, -1.0].into_iter().enumerate() {
                        let d: Vec<f64> = dir.iter().map(|v| sign * v).collect();
                        let hit = domain.ray_exit(&x, &d).unwrap_or(f64::INFINITY);
                        let boundary = |a: f64| -> (f64, Option<(f64, Vec<(u32, f64)>)>) {
                            let p: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + a * di).collect();
                            (a.max(1e-12 * h), Some((g.at(&p), Vec::new())))
                        };
                        let (a, t) = if hit <= *reach {
                            boundary(hit)
                        } else {
                            for i in 0..dim {
                                y[i] = x[i] + reach * d[i];
                            }
                            let corners = lattice
                                .corners(&y)
                                .ok_or_else(|| DppError::OutsideCover { point: y.clone() })?;
                            let all_interior = corners
                                .iter()
                                .all(|(n, _)| grid.kind(n) == NodeKind::Interior);
                            if all_interior {
                                let entries = corners
                                    .iter()
                                    .map(|(n, w)| (grid.unknown(n), w))
                                    .collect();
                                (*reach, Some((f64::NAN, entries)))
                            } else {
                                boundary(hit)
                            }
                        };
                        lens[side] = a;
                        targets[side] = t;
                    }
                    let total = lens[0] + lens[1];
                    for side in 0..2 {
                        let (fixed, entries) = targets[side].take().expect("target set");
                        let start = pool.len() as u32;
                        let len = entries.len() as u32;
                        pool.extend(entries);
                        arms.push(Arm {
                            coef: 1.0 / (lens[side] * total),
                            fixed,
                            start,
                            len,
                        });
                    }
                }
                Ok((arms, pool))
            })
            .collect();

        let mut arms = Vec::with_capacity(interior.len() * 2 * n_keys);
        let mut pool = Vec::new();
        for r in per_node {
            let (a, p) = r?;
            let offset = pool.len() as u32;
            arms.extend(a.into_iter().map(|mut arm| {
                arm.start += offset;
                arm
            }));
            pool.extend(p);
        }

        let source: Vec<f64> = interior
            .iter()
            .map(|&n| opts.dt * f.at(&lattice.point(n)))
            .collect();
        let mut scheme = DppScheme {
            dim,
            dt: opts.dt,
            n_keys,
            controls: cols_per_control,
            arms,
            pool,
            source,
            kappa: Vec::new(),
        };
        scheme.kappa = (0..interior.len())
            .map(|k| {
                let m = scheme
                    .controls
                    .iter()
                    .map(|cols| {
                        cols.iter()
                            .map(|c| {
                                let a = scheme.arm_pair(k, c.key);
                                scheme.dt * c.e * (a[0].coef + a[1].coef)
                            })
                            .sum::<f64>()
                    })
                    .fold(0.0, f64::max);
                m.max(1.0)
            })
            .collect();
        Ok(scheme)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn unknowns(&self) -> usize {
        self.source.len()
    }

    #[inline]
    fn arm_pair(&self, unknown: usize, key: usize) -> &[Arm] {
        let i = (unknown * self.n_keys + key) * 2;
        &self.arms[i..i + 2]
    }

    /// Half directional second differences `sum_side coef (u(arm) - u(x))`
    /// for every catalog key at one unknown.
    fn differences(&self, unknown: usize, u: &[f64], out: &mut [f64]) {
        let ux = u[unknown];
        for (key, o) in out.iter_mut().enumerate() {
            *o = self
                .arm_pair(unknown, key)
                .iter()
                .map(|arm| arm.coef * (arm.value(u, &self.pool) - ux))
                .sum();
        }
    }

    /// `sum_k e_k D_k` per control; lowest index wins ties.
    fn best(&self, d: &[f64], current: Option<usize>) -> (usize, f64) {
        let vals = self
            .controls
            .iter()
            .map(|cols| cols.iter().map(|c| c.e * d[c.key]).sum::<f64>());
        let mut best = (0, f64::NEG_INFINITY);
        let mut all = Vec::with_capacity(self.controls.len());
        for (k, v) in vals.enumerate() {
            all.push(v);
            if v > best.1 {
                best = (k, v);
            }
        }
        let slack = TIE * (1.0 + best.1.abs());
        if let Some(c) = current {
            if all[c] >= best.1 - slack {
                return (c, all[c]);
            }
        }
        let k = all.iter().position(|&v| v >= best.1 - slack).unwrap_or(0);
        (k, all[k])
    }

    /// Generator maximum and maximizing control at each unknown.
    fn improve(&self, u: &[f64], current: Option<&[u32]>) -> Vec<(u32, f64)> {
        (0..self.unknowns())
            .into_par_iter()
            .map_init(
                || vec![0.0; self.n_keys],
                |d, k| {
                    self.differences(k, u, d);
                    let (c, v) = self.best(d, current.map(|p| p[k] as usize));
                    (c as u32, self.source[k] + self.dt * v)
                },
            )
            .collect()
    }

    /// One Jacobi sweep `u + max_A G_A / kappa`. Returns the new values, the
    /// maximizers and the sup-norm change.
    fn sweep(&self, u: &[f64]) -> (Vec<f64>, Vec<u32>, f64) {
        let best = self.improve(u, None);
        let mut change = 0.0f64;
        let mut next = Vec::with_capacity(u.len());
        let mut policy = Vec::with_capacity(u.len());
        for (k, (c, gen)) in best.into_iter().enumerate() {
            let step = gen / self.kappa[k];
            change = change.max(step.abs());
            next.push(u[k] + step);
            policy.push(c);
        }
        (next, policy, change)
    }

    /// Linear system `sum p (u(x) - u(arm)) = dt f` under a frozen policy,
    /// rows scaled by `1/dt`.
    fn frozen_system(&self, policy: &[u32]) -> SparseSystem {
        let n = self.unknowns();
        let mut sys = SparseSystem::with_capacity(n, n * (1 + 4 * self.dim * 4));
        let mut row: Vec<(u32, f64)> = Vec::new();
        for (k, &p) in policy.iter().enumerate() {
            row.clear();
            let mut diag = 0.0;
            let mut rhs = self.source[k] / self.dt;
            for c in &self.controls[p as usize] {
                for arm in self.arm_pair(k, c.key) {
                    let w = c.e * arm.coef;
                    diag += w;
                    if arm.len == 0 {
                        rhs += w * arm.fixed;
                    } else {
                        for &(j, cw) in &self.pool[arm.start as usize..(arm.start + arm.len) as usize] {
                            row.push((j, -w * cw));
                        }
                    }
                }
            }
            row.push((k as u32, diag));
            sys.push_row(row.iter().copied(), rhs);
        }
        sys
    }

    fn read(grid: &ValueGrid) -> Vec<f64> {
        grid.interior_nodes().iter().map(|&n| grid.value(n)).collect()
    }

    fn write(grid: &mut ValueGrid, u: &[f64], policy: &[u32]) {
        for (k, &n) in grid.interior_nodes().to_vec().iter().enumerate() {
            grid.values[n] = u[k];
            grid.policy[n] = policy[k];
        }
    }

    /// One DPP update of `grid`.
    pub fn update(&self, grid: &ValueGrid) -> (ValueGrid, f64) {
        let u = Self::read(grid);
        let (next, policy, change) = self.sweep(&u);
        let mut out = grid.clone();
        Self::write(&mut out, &next, &policy);
        (out, change)
    }

    /// Largest value-iteration step at `grid`.
    pub fn residual(&self, grid: &ValueGrid) -> f64 {
        self.update(grid).1
    }

    /// Iterates to a fixed point from `grid`'s current interior values.
    pub fn solve(&self, grid: ValueGrid, opts: &DppOptions) -> Result<(ValueGrid, SolveReport), DppError> {
        if !(opts.tol > 0.0) {
            return Err(DppError::InvalidTolerance(opts.tol));
        }
        match opts.method {
            SolveMethod::ValueIteration => Ok(self.value_iteration(grid, opts)),
            SolveMethod::PolicyIteration => self.policy_iteration(grid, opts),
        }
    }

    fn value_iteration(&self, mut grid: ValueGrid, opts: &DppOptions) -> (ValueGrid, SolveReport) {
        let mut u = Self::read(&grid);
        let mut policy = vec![0u32; u.len()];
        let mut residuals = Vec::new();
        let mut monotone = true;
        let mut converged = false;
        for _ in 0..opts.max_iter {
            let (next, p, change) = self.sweep(&u);
            monotone &= next.iter().zip(&u).all(|(a, b)| *a >= *b);
            u = next;
            policy = p;
            residuals.push(change);
            if change <= opts.tol {
                converged = true;
                break;
            }
        }
        Self::write(&mut grid, &u, &policy);
        let report = SolveReport {
            iterations: residuals.len(),
            final_residual: residuals.last().copied().unwrap_or(f64::INFINITY),
            dt_dpp: self.dt,
            converged,
            residuals,
            monotone,
        };
        (grid, report)
    }

    fn policy_iteration(&self, mut grid: ValueGrid, opts: &DppOptions) -> Result<(ValueGrid, SolveReport), DppError> {
        let mut u = Self::read(&grid);
        let mut policy: Vec<u32> = self.improve(&u, None).into_iter().map(|b| b.0).collect();
        let mut residuals = Vec::new();
        let rounds = opts.max_iter.clamp(1, MAX_POLICY_ROUNDS);
        let mut converged = false;
        for _ in 0..rounds {
            u = self.frozen_system(&policy).solve_direct()?;
            let best = self.improve(&u, Some(&policy));
            let residual = best
                .iter()
                .zip(&self.kappa)
                .map(|((_, gen), k)| (gen / k).abs())
                .fold(0.0, f64::max);
            residuals.push(residual);
            let next: Vec<u32> = best.iter().map(|b| b.0).collect();
            let stable = next == policy;
            policy = next;
            if stable {
                converged = residual <= opts.tol;
                break;
            }
        }
        Self::write(&mut grid, &u, &policy);
        let report = SolveReport {
            iterations: residuals.len(),
            final_residual: residuals.last().copied().unwrap_or(f64::INFINITY),
            dt_dpp: self.dt,
            converged,
            residuals,
            monotone: false,
        };
        Ok((grid, report))
    }
}

/// One DPP update; see [`DppScheme::update`].
pub fn dpp_update(
    grid: &ValueGrid,
    domain: &Domain,
    controls: &ControlSet,
    f: &ScalarField,
    g: &ScalarField,
    opts: &DppOptions,
) -> Result<(ValueGrid, f64), DppError> {
    Ok(DppScheme::new(grid, domain, controls, f, g, opts)?.update(grid))
}

/// Builds the scheme, fills interior nodes with `opts.init` and iterates.
pub fn solve(
    mut grid: ValueGrid,
    domain: &Domain,
    controls: &ControlSet,
    f: &ScalarField,
    g: &ScalarField,
    opts: &DppOptions,
) -> Result<(ValueGrid, SolveReport), DppError> {
    let scheme = DppScheme::new(&grid, domain, controls, f, g, opts)?;
    grid.fill_interior(opts.init);
    scheme.solve(grid, opts)
}

/// Feedback policy reading `controls[policy_index]` at the nearest node.
pub fn extract_policy(grid: &ValueGrid, controls: &ControlSet) -> Policy {
    Policy::Feedback(FeedbackPolicy::new(
        grid.lattice().clone(),
        grid.feedback_table(),
        controls.controls().to_vec(),
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Certificate {
    /// Monte Carlo value of the extracted policy.
    pub lower: ValueEstimate,
    pub grid_value: f64,
    /// `|lower - grid_value|`.
    pub gap: f64,
    /// `gap / (h + sqrt(dt))`.
    pub observed_constant: f64,
}

impl Certificate {
    /// `gap <= 3 se + c (h + sqrt(dt))`.
    pub fn passes(&self, h: f64, dt: f64, c: f64) -> bool {
        self.gap <= 3.0 * self.lower.stderr + c * (h + dt.sqrt())
    }
}

/// Simulates the extracted feedback policy from `x` and sets the estimate
/// beside the interpolated grid value.
#[allow(clippy::too_many_arguments)]
pub fn mc_certify(
    x: &[f64],
    grid: &ValueGrid,
    controls: &ControlSet,
    domain: &Domain,
    f: &ScalarField,
    g: &ScalarField,
    n_paths: usize,
    cfg: &PathConfig,
) -> Result<Certificate, DppError> {
    let policy = extract_policy(grid, controls);
    let lower = estimate_value(x, &policy, domain, f, g, n_paths, cfg)?;
    let grid_value = if domain.inside(x) {
        grid.interpolate(x)
            .ok_or_else(|| DppError::OutsideCover { point: x.to_vec() })?
    } else {
        g.at(x)
    };
    let gap = (lower.mean - grid_value).abs();
    Ok(Certificate {
        observed_constant: gap / (grid.h() + cfg.dt().sqrt()),
        lower,
        grid_value,
        gap,
    })
}
