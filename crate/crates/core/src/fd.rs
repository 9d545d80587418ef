//! Wide-stencil monotone finite differences for `1/2 P+(D^2 u) + f = 0` in
//! two dimensions, solved by policy iteration.
//!
//! Each stencil pair is two orthogonal lattice vectors. A node's candidate
//! for a pair is `sum_i max(Lam d_i, lam d_i)` over the two directional
//! second differences. The residual is half the best candidate plus `f`.
//! Arms that would leave the domain are cut at the boundary and read `g`
//! there.

use std::f64::consts::PI;

use rayon::prelude::*;
use thiserror::Error;

use crate::dpp::SolveReport;
use crate::exprlang::ScalarField;
use crate::geometry::Domain;
use crate::grid::{build_grid, GridError, NodeKind, ValueGrid, NOT_UNKNOWN};
use crate::linsolve::{LinError, SparseSystem};
use crate::symmat::Ellipticity;

const TIE: f64 = 1e-10;
const MAX_POLICY_ROUNDS: usize = 1000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FdError {
    #[error("the finite-difference oracle is two-dimensional (got N = {0})")]
    UnsupportedDimension(usize),
    #[error("stencil parameters invalid: {0}")]
    InvalidStencil(String),
    #[error("tolerance must be positive (got {0})")]
    InvalidTolerance(f64),
    #[error("node {0} is not an interior node")]
    NotInterior(usize),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Linear(#[from] LinError),
}

/// Lattice direction pairs `(v, v_perp)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StencilSet {
    pairs: Vec<[[i32; 2]; 2]>,
    angles: usize,
    radius: i32,
}

fn gcd(a: i32, b: i32) -> i32 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

fn line_key(v: [i32; 2]) -> [i32; 2] {
    if v[0] < 0 || (v[0] == 0 && v[1] < 0) {
        [-v[0], -v[1]]
    } else {
        v
    }
}

fn angle_gap(v: [i32; 2], theta: f64) -> f64 {
    let phi = (v[1] as f64).atan2(v[0] as f64);
    let d = (phi - theta).rem_euclid(PI);
    d.min(PI - d)
}

impl StencilSet {
    /// Pairs approximating `theta_k = k pi / angles` with primitive vectors
    /// of Chebyshev length at most `radius`; the closest angle wins, then the
    /// shorter vector. Pairs spanning the same two lines are kept once.
    pub fn new(angles: usize, radius: i32) -> Result<Self, FdError> {
        if angles == 0 {
            return Err(FdError::InvalidStencil("angles must be at least 1".into()));
        }
        if radius < 1 {
            return Err(FdError::InvalidStencil("radius must be at least 1".into()));
        }
        let mut candidates = Vec::new();
        for a in -radius..=radius {
            for b in -radius..=radius {
                if (a, b) != (0, 0) && gcd(a, b) == 1 {
                    candidates.push([a, b]);
                }
            }
        }
        let tol = PI / (2 * angles) as f64;
        let mut pairs: Vec<[[i32; 2]; 2]> = Vec::new();
        for k in 0..angles {
            let theta = k as f64 * PI / angles as f64;
            let v = candidates
                .iter()
                .copied()
                .min_by(|&p, &q| {
                    let (gp, gq) = (angle_gap(p, theta), angle_gap(q, theta));
                    if (gp - gq).abs() > 1e-12 {
                        gp.total_cmp(&gq)
                    } else {
                        let lp = p[0] * p[0] + p[1] * p[1];
                        let lq = q[0] * q[0] + q[1] * q[1];
                        lp.cmp(&lq).then(line_key(p).cmp(&line_key(q)))
                    }
                })
                .expect("nonempty candidates");
            if angle_gap(v, theta) > tol + 1e-12 {
                return Err(FdError::InvalidStencil(format!(
                    "no lattice vector within radius {radius} approximates angle {theta:.4}"
                )));
            }
            let v = line_key(v);
            let w = line_key([-v[1], v[0]]);
            let key = if v <= w { [v, w] } else { [w, v] };
            if !pairs.contains(&key) {
                pairs.push(key);
            }
        }
        Ok(StencilSet {
            pairs,
            angles,
            radius,
        })
    }

    /// The axis pair alone: the five-point Laplacian stencil.
    pub fn axis() -> Self {
        StencilSet {
            pairs: vec![[[0, 1], [1, 0]]],
            angles: 1,
            radius: 1,
        }
    }

    pub fn pairs(&self) -> &[[[i32; 2]; 2]] {
        &self.pairs
    }

    pub fn angles(&self) -> usize {
        self.angles
    }

    pub fn radius(&self) -> i32 {
        self.radius
    }

    fn directions(&self) -> impl Iterator<Item = [i32; 2]> + '_ {
        self.pairs.iter().flat_map(|p| p.iter().copied())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Target {
    Unknown(u32),
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Arm {
    len: f64,
    target: Target,
}

fn arm(grid: &ValueGrid, domain: &Domain, g: &ScalarField, node: usize, v: [i32; 2]) -> Arm {
    let lattice = grid.lattice();
    let h = lattice.h();
    let x = lattice.point(node);
    let step = [v[0] as f64 * h, v[1] as f64 * h];
    let full = (step[0] * step[0] + step[1] * step[1]).sqrt();
    let t = domain.ray_exit(&x, &step).unwrap_or(f64::INFINITY);
    let neighbor = lattice.offset(node, &[v[0] as isize, v[1] as isize]);
    if t >= 1.0 {
        if let Some(n) = neighbor.filter(|&n| grid.kind(n) == NodeKind::Interior) {
            return Arm {
                len: full,
                target: Target::Unknown(grid.unknown(n)),
            };
        }
    }
    let t = t.min(1.0).max(1e-12);
    let p = [x[0] + t * step[0], x[1] + t * step[1]];
    Arm {
        len: t * full,
        target: Target::Fixed(g.at(&p)),
    }
}

fn arm_value(a: &Arm, grid: &ValueGrid) -> f64 {
    match a.target {
        Target::Fixed(v) => v,
        Target::Unknown(k) => grid.value(grid.interior_nodes()[k as usize]),
    }
}

/// Second difference of `grid` at `node` along the lattice vector `v`,
/// normalized to unit length. Arms leaving the domain stop at the boundary
/// and read `g` there, giving the three-point formula on uneven spacing.
pub fn directional_second_diff(
    grid: &ValueGrid,
    domain: &Domain,
    g: &ScalarField,
    node: usize,
    v: [i32; 2],
) -> Result<f64, FdError> {
    if grid.lattice().dim() != 2 {
        return Err(FdError::UnsupportedDimension(grid.lattice().dim()));
    }
    if grid.kind(node) != NodeKind::Interior {
        return Err(FdError::NotInterior(node));
    }
    let plus = arm(grid, domain, g, node, v);
    let minus = arm(grid, domain, g, node, [-v[0], -v[1]]);
    let u = grid.value(node);
    let (up, um) = (arm_value(&plus, grid), arm_value(&minus, grid));
    Ok(2.0 / (plus.len + minus.len) * ((up - u) / plus.len + (um - u) / minus.len))
}

/// `1/2 max_pairs sum_i max(Lam d_i, lam d_i) + f(node)`.
pub fn pucci_residual(
    grid: &ValueGrid,
    domain: &Domain,
    g: &ScalarField,
    node: usize,
    stencils: &StencilSet,
    ell: Ellipticity,
    f: &ScalarField,
) -> Result<f64, FdError> {
    let mut best = f64::NEG_INFINITY;
    for pair in stencils.pairs() {
        let mut cand = 0.0;
        for &v in pair {
            let d = directional_second_diff(grid, domain, g, node, v)?;
            cand += (ell.big_lam() * d).max(ell.lam() * d);
        }
        best = best.max(cand);
    }
    Ok(0.5 * best + f.at(&grid.lattice().point(node)))
}

/// How frozen-policy systems are solved.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InnerSolver {
    /// Sparse LU.
    Direct,
    GaussSeidel { tol: f64, max_sweeps: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdOptions {
    pub angles: usize,
    pub radius: i32,
    pub tol: f64,
    pub max_iter: usize,
    pub inner: InnerSolver,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions {
            angles: 8,
            radius: 3,
            tol: 1e-7,
            max_iter: 100_000,
            inner: InnerSolver::Direct,
        }
    }
}

/// Linear pieces of the discrete operator at one node: for policy `q`,
/// `L_q u = sum_j c_j u_j + b - c_0 u(x)`.
#[derive(Debug, Clone)]
pub struct FdScheme {
    ell: Ellipticity,
    n_pairs: usize,
    /// `arms[(unknown * 2 n_pairs + direction) * 2 + side]`
    arms: Vec<Arm>,
    f: Vec<f64>,
    stencils: StencilSet,
}

impl FdScheme {
    pub fn new(
        grid: &ValueGrid,
        domain: &Domain,
        f: &ScalarField,
        g: &ScalarField,
        ell: Ellipticity,
        stencils: StencilSet,
    ) -> Result<Self, FdError> {
        let dim = grid.lattice().dim();
        if dim != 2 || domain.dim() != 2 || f.dim() != 2 || g.dim() != 2 {
            return Err(FdError::UnsupportedDimension(dim));
        }
        let dirs: Vec<[i32; 2]> = stencils.directions().collect();
        let arms: Vec<Arm> = grid
            .interior_nodes()
            .par_iter()
            .flat_map_iter(|&node| {
                dirs.iter()
                    .flat_map(|&v| [arm(grid, domain, g, node, v), arm(grid, domain, g, node, [-v[0], -v[1]])])
                    .collect::<Vec<_>>()
            })
            .collect();
        let fvals = grid
            .interior_nodes()
            .iter()
            .map(|&n| f.at(&grid.lattice().point(n)))
            .collect();
        Ok(FdScheme {
            ell,
            n_pairs: stencils.pairs().len(),
            arms,
            f: fvals,
            stencils,
        })
    }

    pub fn stencils(&self) -> &StencilSet {
        &self.stencils
    }

    /// Number of linear pieces per node: pairs times sign patterns.
    pub fn policies(&self) -> usize {
        4 * self.n_pairs
    }

    fn unknowns(&self) -> usize {
        self.f.len()
    }

    /// `(alpha_+, alpha_-)` with `d = alpha_+ (u_+ - u) + alpha_- (u_- - u)`.
    #[inline]
    fn direction(&self, k: usize, dir: usize) -> (&Arm, &Arm, f64, f64) {
        let i = (k * 2 * self.n_pairs + dir) * 2;
        let (p, m) = (&self.arms[i], &self.arms[i + 1]);
        let s = p.len + m.len;
        (p, m, 2.0 / (s * p.len), 2.0 / (s * m.len))
    }

    fn coefficient(&self, policy: usize, i: usize) -> f64 {
        if policy >> i & 1 == 1 {
            self.ell.big_lam()
        } else {
            self.ell.lam()
        }
    }

    /// Directional second differences at unknown `k`.
    fn diffs(&self, k: usize, u: &[f64], out: &mut [f64]) {
        let read = |a: &Arm| match a.target {
            Target::Fixed(v) => v,
            Target::Unknown(j) => u[j as usize],
        };
        for (dir, o) in out.iter_mut().enumerate() {
            let (p, m, ap, am) = self.direction(k, dir);
            *o = ap * (read(p) - u[k]) + am * (read(m) - u[k]);
        }
    }

    /// Value of piece `q = pair * 4 + signs` given the differences.
    fn piece(&self, q: usize, d: &[f64]) -> f64 {
        let (pair, signs) = (q / 4, q % 4);
        0.5 * (self.coefficient(signs, 0) * d[2 * pair] + self.coefficient(signs, 1) * d[2 * pair + 1])
    }

    fn best(&self, d: &[f64], current: Option<usize>) -> (usize, f64) {
        let vals: Vec<f64> = (0..self.policies()).map(|q| self.piece(q, d)).collect();
        let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let slack = TIE * (1.0 + max.abs());
        if let Some(c) = current {
            if vals[c] >= max - slack {
                return (c, vals[c]);
            }
        }
        let q = vals.iter().position(|&v| v >= max - slack).unwrap_or(0);
        (q, vals[q])
    }

    /// Node value solving the discrete equation at `k` with all other
    /// values held fixed. Nondecreasing in every neighbor value.
    pub fn node_update(&self, k: usize, u: &[f64]) -> f64 {
        let mut best = f64::NEG_INFINITY;
        for q in 0..self.policies() {
            let (pair, signs) = (q / 4, q % 4);
            let mut c0 = 0.0;
            let mut b = self.f[k];
            for i in 0..2 {
                let a = 0.5 * self.coefficient(signs, i);
                let (p, m, ap, am) = self.direction(k, 2 * pair + i);
                for (arm, alpha) in [(p, ap), (m, am)] {
                    c0 += a * alpha;
                    b += a
                        * alpha
                        * match arm.target {
                            Target::Fixed(v) => v,
                            Target::Unknown(j) => u[j as usize],
                        };
                }
            }
            best = best.max(b / c0);
        }
        best
    }

    fn improve(&self, u: &[f64], current: Option<&[u32]>) -> Vec<u32> {
        (0..self.unknowns())
            .into_par_iter()
            .map_init(
                || vec![0.0; 2 * self.n_pairs],
                |d, k| {
                    self.diffs(k, u, d);
                    self.best(d, current.map(|c| c[k] as usize)).0 as u32
                },
            )
            .collect()
    }

    /// `max_k |node_update(k) - u_k|`.
    pub fn update_residual(&self, u: &[f64]) -> f64 {
        (0..self.unknowns())
            .into_par_iter()
            .map(|k| (self.node_update(k, u) - u[k]).abs())
            .reduce(|| 0.0, f64::max)
    }

    fn frozen_system(&self, policy: &[u32]) -> SparseSystem {
        let n = self.unknowns();
        let mut sys = SparseSystem::with_capacity(n, 5 * n);
        let mut row = Vec::with_capacity(5);
        for (k, &q) in policy.iter().enumerate() {
            let q = q as usize;
            let (pair, signs) = (q / 4, q % 4);
            row.clear();
            let mut diag = 0.0;
            let mut rhs = self.f[k];
            for i in 0..2 {
                let a = 0.5 * self.coefficient(signs, i);
                let (p, m, ap, am) = self.direction(k, 2 * pair + i);
                for (arm, alpha) in [(p, ap), (m, am)] {
                    diag += a * alpha;
                    match arm.target {
                        Target::Fixed(v) => rhs += a * alpha * v,
                        Target::Unknown(j) => row.push((j, -a * alpha)),
                    }
                }
            }
            row.push((k as u32, diag));
            sys.push_row(row.iter().copied(), rhs);
        }
        sys
    }

    /// Policy iteration from `u0` (one value per interior node).
    pub fn solve(&self, u0: Vec<f64>, opts: &FdOptions) -> Result<(Vec<f64>, Vec<u32>, SolveReport), FdError> {
        if !(opts.tol > 0.0) {
            return Err(FdError::InvalidTolerance(opts.tol));
        }
        let mut u = u0;
        let mut policy = self.improve(&u, None);
        let mut residuals = Vec::new();
        let mut converged = false;
        for _ in 0..opts.max_iter.clamp(1, MAX_POLICY_ROUNDS) {
            let sys = self.frozen_system(&policy);
            match opts.inner {
                InnerSolver::Direct => u = sys.solve_direct()?,
                InnerSolver::GaussSeidel { tol, max_sweeps } => {
                    sys.gauss_seidel(&mut u, tol, max_sweeps);
                }
            }
            let residual = self.update_residual(&u);
            residuals.push(residual);
            let next = self.improve(&u, Some(&policy));
            let stable = next == policy;
            policy = next;
            if stable && residual <= opts.tol {
                converged = true;
                break;
            }
            if stable && matches!(opts.inner, InnerSolver::Direct) {
                break;
            }
        }
        let report = SolveReport {
            iterations: residuals.len(),
            final_residual: residuals.last().copied().unwrap_or(f64::INFINITY),
            dt_dpp: 0.0,
            converged,
            residuals,
            monotone: false,
        };
        Ok((u, policy, report))
    }
}

/// Builds the grid over `domain` and solves the discrete Bellman equation.
/// The grid's `policy_index` is `pair * 4 + signs`, where bit `i` of `signs`
/// selects `Lam` for the `i`-th direction of the pair.
pub fn solve_policy_iteration(
    domain: &Domain,
    f: &ScalarField,
    g: &ScalarField,
    h: f64,
    ell: Ellipticity,
    opts: &FdOptions,
) -> Result<(ValueGrid, SolveReport), FdError> {
    if domain.dim() != 2 {
        return Err(FdError::UnsupportedDimension(domain.dim()));
    }
    let stencils = StencilSet::new(opts.angles, opts.radius)?;
    solve_with_stencils(domain, f, g, h, ell, stencils, opts)
}

/// [`solve_policy_iteration`] with an explicit stencil set.
pub fn solve_with_stencils(
    domain: &Domain,
    f: &ScalarField,
    g: &ScalarField,
    h: f64,
    ell: Ellipticity,
    stencils: StencilSet,
    opts: &FdOptions,
) -> Result<(ValueGrid, SolveReport), FdError> {
    let mut grid = build_grid(domain, g, h)?;
    let scheme = FdScheme::new(&grid, domain, f, g, ell, stencils)?;
    let u0 = vec![0.0; grid.interior_nodes().len()];
    let (u, policy, report) = scheme.solve(u0, opts)?;
    let nodes = grid.interior_nodes().to_vec();
    for (k, n) in nodes.into_iter().enumerate() {
        grid.values[n] = u[k];
        grid.policy[n] = policy[k];
    }
    debug_assert!(grid.interior_nodes().iter().all(|&n| grid.unknown(n) != NOT_UNKNOWN));
    Ok((grid, report))
}
