//! Small dense symmetric matrices, Pucci's maximal operator and the
//! diffusion controls that realize it.
//!
//! Everything here is desk-scale (`N <= 16`). The eigensolver is a cyclic
//! Jacobi sweep, which is slow for large matrices but unconditionally
//! convergent and deterministic for the sizes we care about.

use std::f64::consts::PI;
use std::fmt;

use thiserror::Error;

/// Largest dimension accepted by [`eigen`].
pub const MAX_DIM: usize = 16;

const JACOBI_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;
const PSD_CLAMP: f64 = 1e-10;
const PSD_REJECT: f64 = 1e-8;
const CONTROL_EIG_SLACK: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SymError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },
    #[error("matrix dimension {0} outside supported range 1..={MAX_DIM}")]
    UnsupportedDimension(usize),
    #[error("matrix is not symmetric: entry ({i},{j}) differs from ({j},{i}) by {diff:e}")]
    NotSymmetric { i: usize, j: usize, diff: f64 },
    #[error("Jacobi eigensolver did not converge after {sweeps} sweeps (off-diagonal norm {off_norm:e})")]
    NoConvergence { sweeps: usize, off_norm: f64 },
    #[error("ellipticity constants must satisfy 0 < lam <= Lam (got lam = {lam}, Lam = {big_lam})")]
    InvalidEllipticity { lam: f64, big_lam: f64 },
    #[error("matrix is not positive semidefinite (smallest eigenvalue {min_eigenvalue:e})")]
    NotPsd { min_eigenvalue: f64 },
    #[error("control violates ellipticity bounds: eigenvalue {eigenvalue} not in [{lam}, {big_lam}]")]
    OutOfBounds { eigenvalue: f64, lam: f64, big_lam: f64 },
    #[error("invalid enumeration parameter: {0}")]
    InvalidCount(&'static str),
}

/// The pair `0 < lam <= Lam` bounding the spectrum of admissible diffusions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipticity {
    lam: f64,
    big_lam: f64,
}

impl Ellipticity {
    pub fn new(lam: f64, big_lam: f64) -> Result<Self, SymError> {
        if !(lam > 0.0 && lam <= big_lam && big_lam.is_finite()) {
            return Err(SymError::InvalidEllipticity { lam, big_lam });
        }
        Ok(Ellipticity { lam, big_lam })
    }

    /// Lower spectral bound.
    pub fn lam(&self) -> f64 {
        self.lam
    }

    /// Upper spectral bound.
    pub fn big_lam(&self) -> f64 {
        self.big_lam
    }

    /// Weight applied to an eigenvalue of the Hessian by the maximal operator.
    #[inline]
    pub fn weight(&self, eigenvalue: f64) -> f64 {
        if eigenvalue >= 0.0 {
            self.big_lam
        } else {
            self.lam
        }
    }
}

/// Symmetric `N x N` matrix stored as its lower triangle, row by row.
#[derive(Clone, PartialEq)]
pub struct SymMatrix {
    dim: usize,
    data: Vec<f64>,
}

#[inline]
fn packed(i: usize, j: usize) -> usize {
    let (r, c) = if i >= j { (i, j) } else { (j, i) };
    r * (r + 1) / 2 + c
}

impl SymMatrix {
    pub fn zeros(dim: usize) -> Self {
        SymMatrix {
            dim,
            data: vec![0.0; dim * (dim + 1) / 2],
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self::from_diag(&vec![1.0; dim])
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m.set(i, i, d);
        }
        m
    }

    /// Builds a matrix from `f(i, j)` evaluated on the lower triangle.
    pub fn from_fn(dim: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            for j in 0..=i {
                m.set(i, j, f(i, j));
            }
        }
        m
    }

    /// Builds from a row-major dense matrix, rejecting asymmetry above
    /// `1e-12 * (1 + max|a_ij|)`. The two triangles are averaged.
    pub fn from_dense(dim: usize, dense: &[f64]) -> Result<Self, SymError> {
        if dense.len() != dim * dim {
            return Err(SymError::Dimension {
                expected: dim * dim,
                found: dense.len(),
            });
        }
        let scale = 1.0 + dense.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..dim {
            for j in 0..i {
                let diff = (dense[i * dim + j] - dense[j * dim + i]).abs();
                if diff > 1e-12 * scale {
                    return Err(SymError::NotSymmetric { i, j, diff });
                }
            }
        }
        Ok(Self::from_fn(dim, |i, j| {
            0.5 * (dense[i * dim + j] + dense[j * dim + i])
        }))
    }

    /// `Q diag(values) Q^T` for a row-major orthogonal `Q` whose columns are
    /// the eigenvectors.
    pub fn from_spectrum(values: &[f64], vectors: &[f64]) -> Self {
        let n = values.len();
        Self::from_fn(n, |i, j| {
            (0..n)
                .map(|k| vectors[i * n + k] * values[k] * vectors[j * n + k])
                .sum()
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[packed(i, j)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[packed(i, j)] = v;
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }

    /// Frobenius norm `|S| = sqrt(<S, S>)`.
    pub fn norm(&self) -> f64 {
        frobenius_unchecked(self, self).sqrt()
    }

    pub fn scaled(&self, t: f64) -> Self {
        SymMatrix {
            dim: self.dim,
            data: self.data.iter().map(|v| v * t).collect(),
        }
    }

    pub fn add(&self, other: &SymMatrix) -> Result<Self, SymError> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &SymMatrix) -> Result<Self, SymError> {
        self.zip_with(other, |a, b| a - b)
    }

    fn zip_with(&self, other: &SymMatrix, f: impl Fn(f64, f64) -> f64) -> Result<Self, SymError> {
        check_dims(self, other)?;
        Ok(SymMatrix {
            dim: self.dim,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Row-major dense copy.
    pub fn to_dense(&self) -> Vec<f64> {
        let n = self.dim;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = self.get(i, j);
            }
        }
        out
    }

    /// `v^T S v`.
    pub fn quadratic_form(&self, v: &[f64]) -> f64 {
        let n = self.dim;
        let mut acc = 0.0;
        for i in 0..n {
            acc += self.get(i, i) * v[i] * v[i];
            for j in 0..i {
                acc += 2.0 * self.get(i, j) * v[i] * v[j];
            }
        }
        acc
    }

    /// `S x`.
    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.dim)
            .map(|i| (0..self.dim).map(|j| self.get(i, j) * v[j]).sum())
            .collect()
    }
}

impl fmt::Debug for SymMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows: Vec<Vec<f64>> = (0..self.dim)
            .map(|i| (0..self.dim).map(|j| self.get(i, j)).collect())
            .collect();
        f.debug_struct("SymMatrix").field("rows", &rows).finish()
    }
}

fn check_dims(a: &SymMatrix, b: &SymMatrix) -> Result<(), SymError> {
    if a.dim != b.dim {
        return Err(SymError::Dimension {
            expected: a.dim,
            found: b.dim,
        });
    }
    Ok(())
}

fn frobenius_unchecked(a: &SymMatrix, b: &SymMatrix) -> f64 {
    let mut acc = 0.0;
    for i in 0..a.dim {
        acc += a.get(i, i) * b.get(i, i);
        for j in 0..i {
            acc += 2.0 * a.get(i, j) * b.get(i, j);
        }
    }
    acc
}

/// Frobenius product `<A, B> = tr(A B^T) = sum_ij A_ij B_ij`.
pub fn frobenius(a: &SymMatrix, b: &SymMatrix) -> Result<f64, SymError> {
    check_dims(a, b)?;
    Ok(frobenius_unchecked(a, b))
}

/// Spectral decomposition `S = Q diag(values) Q^T`.
#[derive(Debug, Clone)]
pub struct Eigen {
    /// Eigenvalues in ascending order.
    pub values: Vec<f64>,
    /// Row-major `N x N`; column `k` is the unit eigenvector for `values[k]`.
    pub vectors: Vec<f64>,
}

impl Eigen {
    pub fn vector(&self, k: usize) -> Vec<f64> {
        let n = self.values.len();
        (0..n).map(|i| self.vectors[i * n + k]).collect()
    }
}

/// Cyclic Jacobi eigen-decomposition.
///
/// Sweeps rotate away every off-diagonal entry in row order until the
/// off-diagonal Frobenius norm drops below `1e-12 * |S|` (or below `1e-300`
/// for the zero matrix). Gives up with [`SymError::NoConvergence`] after 100
/// sweeps.
pub fn eigen(s: &SymMatrix) -> Result<Eigen, SymError> {
    let n = s.dim;
    if n == 0 || n > MAX_DIM {
        return Err(SymError::UnsupportedDimension(n));
    }
    let mut a = s.to_dense();
    let mut q = vec![0.0; n * n];
    for i in 0..n {
        q[i * n + i] = 1.0;
    }
    let threshold = (JACOBI_TOL * s.norm()).max(1e-300);

    let off_norm = |a: &[f64]| -> f64 {
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..i {
                acc += 2.0 * a[i * n + j] * a[i * n + j];
            }
        }
        acc.sqrt()
    };

    let mut sweeps = 0;
    loop {
        let off = off_norm(&a);
        if off <= threshold {
            break;
        }
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(SymError::NoConvergence {
                sweeps,
                off_norm: off,
            });
        }
        sweeps += 1;
        for p in 0..n {
            for r in (p + 1)..n {
                let apr = a[p * n + r];
                if apr == 0.0 {
                    continue;
                }
                let theta = (a[r * n + r] - a[p * n + p]) / (2.0 * apr);
                let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let sn = t * c;
                // A <- J^T A J with J the (p, r) plane rotation
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akr = a[k * n + r];
                    a[k * n + p] = c * akp - sn * akr;
                    a[k * n + r] = sn * akp + c * akr;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let ark = a[r * n + k];
                    a[p * n + k] = c * apk - sn * ark;
                    a[r * n + k] = sn * apk + c * ark;
                }
                a[p * n + r] = 0.0;
                a[r * n + p] = 0.0;
                for k in 0..n {
                    let qkp = q[k * n + p];
                    let qkr = q[k * n + r];
                    q[k * n + p] = c * qkp - sn * qkr;
                    q[k * n + r] = sn * qkp + c * qkr;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[i * n + i].total_cmp(&a[j * n + j]));
    let values = order.iter().map(|&k| a[k * n + k]).collect();
    let mut vectors = vec![0.0; n * n];
    for (dst, &src) in order.iter().enumerate() {
        for i in 0..n {
            vectors[i * n + dst] = q[i * n + src];
        }
    }
    Ok(Eigen { values, vectors })
}

/// Pucci's maximal operator `Lam * (sum of eigenvalues >= 0) + lam * (sum of
/// eigenvalues < 0)`, which equals `max <A, S>` over symmetric `A` with
/// spectrum in `[lam, Lam]`.
pub fn pucci_plus(s: &SymMatrix, ell: Ellipticity) -> Result<f64, SymError> {
    let eig = eigen(s)?;
    Ok(eig.values.iter().map(|&e| ell.weight(e) * e).sum())
}

/// The maximizer `A*` of `<A, S>` over the admissible diffusions: the
/// eigenbasis of `S` with `Lam` on nonnegative and `lam` on negative
/// eigenvalues.
pub fn optimal_diffusion(s: &SymMatrix, ell: Ellipticity) -> Result<SymMatrix, SymError> {
    let eig = eigen(s)?;
    let weights: Vec<f64> = eig.values.iter().map(|&e| ell.weight(e)).collect();
    Ok(SymMatrix::from_spectrum(&weights, &eig.vectors))
}

/// A diffusion coefficient `sigma` together with `sigma sigma^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Control {
    sigma: Vec<f64>,
    diffusion: SymMatrix,
}

impl Control {
    /// Wraps an arbitrary row-major `sigma`, computing `sigma sigma^T`.
    pub fn from_sigma(dim: usize, sigma: Vec<f64>) -> Result<Self, SymError> {
        if sigma.len() != dim * dim {
            return Err(SymError::Dimension {
                expected: dim * dim,
                found: sigma.len(),
            });
        }
        let diffusion = SymMatrix::from_fn(dim, |i, j| {
            (0..dim).map(|k| sigma[i * dim + k] * sigma[j * dim + k]).sum()
        });
        Ok(Control { sigma, diffusion })
    }

    /// `sqrt(c) * I`.
    pub fn scaled_identity(dim: usize, c: f64) -> Self {
        let s = c.sqrt();
        let mut sigma = vec![0.0; dim * dim];
        for i in 0..dim {
            sigma[i * dim + i] = s;
        }
        Control {
            sigma,
            diffusion: SymMatrix::from_diag(&vec![c; dim]),
        }
    }

    pub fn dim(&self) -> usize {
        self.diffusion.dim
    }

    /// Row-major `sigma`.
    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    /// `sigma sigma^T`.
    pub fn diffusion(&self) -> &SymMatrix {
        &self.diffusion
    }

    /// Column `k` of `sigma`.
    pub fn column(&self, k: usize) -> Vec<f64> {
        let n = self.dim();
        (0..n).map(|i| self.sigma[i * n + k]).collect()
    }

    /// `sigma * v`, written into `out`.
    #[inline]
    pub fn apply(&self, v: &[f64], out: &mut [f64]) {
        let n = self.dim();
        for i in 0..n {
            let row = &self.sigma[i * n..(i + 1) * n];
            out[i] = row.iter().zip(v).map(|(a, b)| a * b).sum();
        }
    }

    /// Checks the spectrum of `sigma sigma^T` against `ell` (with `1e-9`
    /// slack) and that the stored diffusion matches the stored `sigma`.
    pub fn validate(&self, ell: Ellipticity) -> Result<(), SymError> {
        let rebuilt = Control::from_sigma(self.dim(), self.sigma.clone())?;
        let diff = rebuilt.diffusion.sub(&self.diffusion)?.norm();
        if diff > 1e-10 {
            return Err(SymError::NotSymmetric { i: 0, j: 0, diff });
        }
        for &e in &eigen(&self.diffusion)?.values {
            if e < ell.lam - CONTROL_EIG_SLACK || e > ell.big_lam + CONTROL_EIG_SLACK {
                return Err(SymError::OutOfBounds {
                    eigenvalue: e,
                    lam: ell.lam,
                    big_lam: ell.big_lam,
                });
            }
        }
        Ok(())
    }
}

/// Principal square root: the symmetric PSD `sigma` with `sigma^2 = A`.
///
/// Eigenvalues down to `-1e-10` are clamped to zero; anything below `-1e-8`
/// is rejected.
pub fn sqrt_factor(a: &SymMatrix) -> Result<Control, SymError> {
    let eig = eigen(a)?;
    let min = eig.values[0];
    if min < -PSD_REJECT {
        return Err(SymError::NotPsd { min_eigenvalue: min });
    }
    let roots: Vec<f64> = eig
        .values
        .iter()
        .map(|&e| if e < PSD_CLAMP { e.max(0.0).sqrt() } else { e.sqrt() })
        .collect();
    let sigma = SymMatrix::from_spectrum(&roots, &eig.vectors);
    Ok(Control {
        sigma: sigma.to_dense(),
        diffusion: a.clone(),
    })
}

/// Parameters a [`ControlSet`] was enumerated from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Enumeration {
    pub angles: usize,
    pub levels: usize,
    pub ell: Ellipticity,
}

/// Finite, deduplicated subset of the admissible controls.
#[derive(Debug, Clone)]
pub struct ControlSet {
    controls: Vec<Control>,
    provenance: Enumeration,
}

impl ControlSet {
    pub fn controls(&self) -> &[Control] {
        &self.controls
    }

    pub fn len(&self) -> usize {
        self.controls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.controls.is_empty()
    }

    pub fn provenance(&self) -> Enumeration {
        self.provenance
    }

    pub fn ell(&self) -> Ellipticity {
        self.provenance.ell
    }

    pub fn dim(&self) -> usize {
        self.controls[0].dim()
    }

    /// `max <sigma sigma^T, S>` over the set, with the lowest maximizing index.
    pub fn best_response(&self, s: &SymMatrix) -> Result<(usize, f64), SymError> {
        let mut best = (0, f64::NEG_INFINITY);
        for (k, c) in self.controls.iter().enumerate() {
            let v = frobenius(c.diffusion(), s)?;
            if v > best.1 {
                best = (k, v);
            }
        }
        Ok(best)
    }
}

fn level_grid(ell: Ellipticity, levels: usize) -> Vec<f64> {
    let (lo, hi) = (ell.lam, ell.big_lam);
    (0..levels)
        .map(|j| {
            if j + 1 == levels {
                hi
            } else {
                lo + (hi - lo) * j as f64 / (levels - 1) as f64
            }
        })
        .collect()
}

/// Discretizes the admissible diffusions.
///
/// For `N = 2` the eigenbasis is rotated through `theta = k pi / angles` and
/// each eigenvalue ranges over `levels` uniform values in `[lam, Lam]`. For
/// other dimensions only axis-aligned eigenbases are produced (`angles` is
/// ignored), which does not cover the admissible set. Duplicates (within
/// `1e-12` in Frobenius norm) are dropped, so `lam == Lam` collapses to a
/// single control. The first control is always `sqrt(lam) I`.
pub fn enumerate_controls(
    dim: usize,
    ell: Ellipticity,
    angles: usize,
    levels: usize,
) -> Result<ControlSet, SymError> {
    if dim == 0 || dim > MAX_DIM {
        return Err(SymError::UnsupportedDimension(dim));
    }
    if angles == 0 {
        return Err(SymError::InvalidCount("angles must be at least 1"));
    }
    if levels < 2 {
        return Err(SymError::InvalidCount("levels must be at least 2"));
    }
    let grid = level_grid(ell, levels);
    let mut diffusions: Vec<SymMatrix> = Vec::new();
    let mut push = |a: SymMatrix| {
        if !diffusions
            .iter()
            .any(|d| d.sub(&a).map(|m| m.norm() <= 1e-12).unwrap_or(false))
        {
            diffusions.push(a);
        }
    };

    if dim == 2 {
        for k in 0..angles {
            let theta = k as f64 * PI / angles as f64;
            let (s, c) = theta.sin_cos();
            let q = [c, -s, s, c];
            for &e1 in &grid {
                for &e2 in &grid {
                    push(SymMatrix::from_spectrum(&[e1, e2], &q));
                }
            }
        }
    } else {
        let total = levels.pow(dim as u32);
        for code in 0..total {
            let mut rest = code;
            let diag: Vec<f64> = (0..dim)
                .map(|_| {
                    let e = grid[rest % levels];
                    rest /= levels;
                    e
                })
                .collect();
            push(SymMatrix::from_diag(&diag));
        }
    }

    let controls = diffusions
        .iter()
        .map(sqrt_factor)
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ControlSet {
        controls,
        provenance: Enumeration { angles, levels, ell },
    })
}

/// Wraps an explicit list of controls after validating each against `ell`.
pub fn control_set_from(controls: Vec<Control>, ell: Ellipticity) -> Result<ControlSet, SymError> {
    if controls.is_empty() {
        return Err(SymError::InvalidCount("control set must be nonempty"));
    }
    let dim = controls[0].dim();
    for c in &controls {
        if c.dim() != dim {
            return Err(SymError::Dimension {
                expected: dim,
                found: c.dim(),
            });
        }
        c.validate(ell)?;
    }
    Ok(ControlSet {
        controls,
        provenance: Enumeration {
            angles: 0,
            levels: 0,
            ell,
        },
    })
}
