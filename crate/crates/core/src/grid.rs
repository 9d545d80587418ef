//! Uniform lattices over a domain and the value grids solvers write into.

use std::io::{self, Write};

use thiserror::Error;

use crate::exprlang::ScalarField;
use crate::geometry::{Domain, GeometryError};

/// Extra rows of nodes beyond the bounding box on every side.
const PAD: usize = 2;
/// Fractional cell offsets closer than this to a node snap onto it.
const SNAP: f64 = 1e-9;
/// Grids are limited to `N <= 3`.
pub const MAX_GRID_DIM: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("lattice spacing must be positive and finite (got {0})")]
    InvalidSpacing(f64),
    #[error("grid dimension {0} unsupported (1..=3)")]
    UnsupportedDimension(usize),
    #[error("spacing h = {h} is too coarse: no lattice node lies inside the domain")]
    NoInteriorNodes { h: f64 },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Regular lattice `mid + (k - half) h`, indexed in row-major order with the
/// last coordinate fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Lattice {
    mid: Vec<f64>,
    half: Vec<usize>,
    shape: Vec<usize>,
    strides: Vec<usize>,
    h: f64,
}

/// Multilinear interpolation stencil: up to `2^3` corners.
#[derive(Debug, Clone, Copy)]
pub struct Corners {
    pub len: usize,
    pub node: [usize; 8],
    pub weight: [f64; 8],
}

impl Corners {
    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        (0..self.len).map(|k| (self.node[k], self.weight[k]))
    }
}

impl Lattice {
    /// Lattice covering `[lo, hi]` with `PAD` extra layers, centered on the
    /// box midpoint so that symmetric domains have their center on a node.
    pub fn covering(lo: &[f64], hi: &[f64], h: f64) -> Result<Self, GridError> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(GridError::InvalidSpacing(h));
        }
        let dim = lo.len();
        if dim == 0 || dim > MAX_GRID_DIM {
            return Err(GridError::UnsupportedDimension(dim));
        }
        let mid: Vec<f64> = lo.iter().zip(hi).map(|(a, b)| 0.5 * (a + b)).collect();
        let half: Vec<usize> = lo
            .iter()
            .zip(hi)
            .map(|(a, b)| (0.5 * (b - a) / h - 1e-9).ceil().max(0.0) as usize + PAD)
            .collect();
        let shape: Vec<usize> = half.iter().map(|k| 2 * k + 1).collect();
        let mut strides = vec![1; dim];
        for i in (0..dim.saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * shape[i + 1];
        }
        Ok(Lattice {
            mid,
            half,
            shape,
            strides,
            h,
        })
    }

    pub fn dim(&self) -> usize {
        self.shape.len()
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn multi_index(&self, mut node: usize) -> Vec<usize> {
        self.strides
            .iter()
            .map(|s| {
                let k = node / s;
                node %= s;
                k
            })
            .collect()
    }

    pub fn flat(&self, multi: &[usize]) -> usize {
        multi.iter().zip(&self.strides).map(|(k, s)| k * s).sum()
    }

    #[inline]
    fn coord(&self, axis: usize, k: usize) -> f64 {
        self.mid[axis] + (k as f64 - self.half[axis] as f64) * self.h
    }

    pub fn point(&self, node: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.point_into(node, &mut out);
        out
    }

    pub fn point_into(&self, mut node: usize, out: &mut [f64]) {
        for (axis, s) in self.strides.iter().enumerate() {
            out[axis] = self.coord(axis, node / s);
            node %= s;
        }
    }

    /// Node whose Voronoi cell contains `x`, clamped to the lattice.
    pub fn nearest(&self, x: &[f64]) -> usize {
        let mut node = 0;
        for axis in 0..self.dim() {
            let u = (x[axis] - self.mid[axis]) / self.h + self.half[axis] as f64;
            let k = u.round().clamp(0.0, (self.shape[axis] - 1) as f64) as usize;
            node += k * self.strides[axis];
        }
        node
    }

    /// Multilinear interpolation weights at `x`, dropping zero-weight corners.
    /// `None` when `x` lies outside the lattice cover.
    pub fn corners(&self, x: &[f64]) -> Option<Corners> {
        let dim = self.dim();
        let mut base = [0usize; MAX_GRID_DIM];
        let mut frac = [0.0f64; MAX_GRID_DIM];
        for axis in 0..dim {
            let u = (x[axis] - self.mid[axis]) / self.h + self.half[axis] as f64;
            let mut k = u.floor();
            let mut t = u - k;
            if t > 1.0 - SNAP {
                k += 1.0;
                t = 0.0;
            } else if t < SNAP {
                t = 0.0;
            }
            let last = (self.shape[axis] - 1) as f64;
            if k < 0.0 || k > last || (t > 0.0 && k >= last) {
                return None;
            }
            base[axis] = k as usize;
            frac[axis] = t;
        }
        let mut out = Corners {
            len: 0,
            node: [0; 8],
            weight: [0.0; 8],
        };
        for mask in 0..(1usize << dim) {
            let mut w = 1.0;
            let mut node = 0;
            for axis in 0..dim {
                let up = mask >> axis & 1 == 1;
                let t = frac[axis];
                if up {
                    w *= t;
                } else {
                    w *= 1.0 - t;
                }
                node += (base[axis] + up as usize) * self.strides[axis];
            }
            if w > 0.0 {
                out.node[out.len] = node;
                out.weight[out.len] = w;
                out.len += 1;
            }
        }
        Some(out)
    }

    /// Nodes in the `3^N` block around `node` (excluding it), inside the
    /// lattice.
    pub fn neighbors(&self, node: usize) -> Vec<usize> {
        let dim = self.dim();
        let center = self.multi_index(node);
        let mut out = Vec::with_capacity(3usize.pow(dim as u32));
        let total = 3usize.pow(dim as u32);
        'outer: for code in 0..total {
            let mut rest = code;
            let mut multi = vec![0usize; dim];
            for axis in 0..dim {
                let off = (rest % 3) as isize - 1;
                rest /= 3;
                let k = center[axis] as isize + off;
                if k < 0 || k >= self.shape[axis] as isize {
                    continue 'outer;
                }
                multi[axis] = k as usize;
            }
            let n = self.flat(&multi);
            if n != node {
                out.push(n);
            }
        }
        out
    }

    /// Node reached from `node` by an integer offset, if on the lattice.
    pub fn offset(&self, node: usize, delta: &[isize]) -> Option<usize> {
        let multi = self.multi_index(node);
        let mut out = 0;
        for axis in 0..self.dim() {
            let k = multi[axis] as isize + delta[axis];
            if k < 0 || k >= self.shape[axis] as isize {
                return None;
            }
            out += k as usize * self.strides[axis];
        }
        Some(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    /// Node in the open domain; carries an unknown.
    Interior,
    /// Outside the domain within `h sqrt(N)` of its closure; carries `g`.
    BoundaryBand,
    /// Unused.
    Exterior,
}

impl NodeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NodeKind::Interior => "interior",
            NodeKind::BoundaryBand => "boundary_band",
            NodeKind::Exterior => "exterior",
        }
    }
}

/// Discrete value function on a lattice over the closure of a domain.
#[derive(Debug, Clone)]
pub struct ValueGrid {
    lattice: Lattice,
    kinds: Vec<NodeKind>,
    pub(crate) values: Vec<f64>,
    pub(crate) policy: Vec<u32>,
    interior: Vec<usize>,
    unknown_of: Vec<u32>,
}

pub(crate) const NOT_UNKNOWN: u32 = u32::MAX;

/// Classifies lattice nodes over `domain` and pins band nodes to `g` at
/// their boundary projection. Interior values start at zero.
pub fn build_grid(domain: &Domain, g: &ScalarField, h: f64) -> Result<ValueGrid, GridError> {
    let (lo, hi) = domain.bounding_box();
    let lattice = Lattice::covering(&lo, &hi, h)?;
    let dim = lattice.dim();
    let band_width = h * (dim as f64).sqrt() * (1.0 + 1e-12);
    let mut kinds = Vec::with_capacity(lattice.len());
    let mut p = vec![0.0; dim];
    for node in 0..lattice.len() {
        lattice.point_into(node, &mut p);
        let kind = if domain.inside(&p) {
            NodeKind::Interior
        } else if domain.boundary_distance(&p) >= -band_width {
            NodeKind::BoundaryBand
        } else {
            NodeKind::Exterior
        };
        kinds.push(kind);
    }
    let interior: Vec<usize> = (0..lattice.len())
        .filter(|&n| kinds[n] == NodeKind::Interior)
        .collect();
    if interior.is_empty() {
        return Err(GridError::NoInteriorNodes { h });
    }
    let mut unknown_of = vec![NOT_UNKNOWN; lattice.len()];
    for (k, &n) in interior.iter().enumerate() {
        unknown_of[n] = k as u32;
    }

    let mut values = vec![0.0; lattice.len()];
    for node in 0..lattice.len() {
        if kinds[node] != NodeKind::BoundaryBand {
            continue;
        }
        let x = lattice.point(node);
        let nearest_interior = lattice
            .neighbors(node)
            .into_iter()
            .filter(|&n| kinds[n] == NodeKind::Interior)
            .map(|n| {
                let q = lattice.point(n);
                let d: f64 = q.iter().zip(&x).map(|(a, b)| (a - b) * (a - b)).sum();
                (d, q)
            })
            .min_by(|a, b| a.0.total_cmp(&b.0));
        let foot = match nearest_interior {
            Some((_, q)) => domain.segment_exit(&q, &x).point,
            None => domain.closest_boundary_point(&x).0,
        };
        values[node] = g.at(&foot);
    }

    Ok(ValueGrid {
        lattice,
        kinds,
        values,
        policy: vec![0; 0],
        interior,
        unknown_of,
    }
    .with_policy_storage())
}

impl ValueGrid {
    fn with_policy_storage(mut self) -> Self {
        self.policy = vec![0; self.lattice.len()];
        self
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn h(&self) -> f64 {
        self.lattice.h
    }

    pub fn kind(&self, node: usize) -> NodeKind {
        self.kinds[node]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, node: usize) -> f64 {
        self.values[node]
    }

    /// Index into the solver's control (or stencil) catalog at an interior node.
    pub fn policy_index(&self, node: usize) -> u32 {
        self.policy[node]
    }

    /// Interior nodes in lattice order.
    pub fn interior_nodes(&self) -> &[usize] {
        &self.interior
    }

    pub(crate) fn unknown(&self, node: usize) -> u32 {
        self.unknown_of[node]
    }

    /// Overwrites every interior value.
    pub fn fill_interior(&mut self, v: f64) {
        for &n in &self.interior {
            self.values[n] = v;
        }
    }

    pub fn set_interior_values(&mut self, f: impl Fn(&[f64]) -> f64) {
        let mut p = vec![0.0; self.lattice.dim()];
        for &n in &self.interior {
            self.lattice.point_into(n, &mut p);
            self.values[n] = f(&p);
        }
    }

    /// Multilinear interpolation of the grid at `x`. `None` outside the cover
    /// or where a contributing corner is exterior.
    pub fn interpolate(&self, x: &[f64]) -> Option<f64> {
        let c = self.lattice.corners(x)?;
        let mut acc = 0.0;
        for (n, w) in c.iter() {
            if self.kinds[n] == NodeKind::Exterior {
                return None;
            }
            acc += w * self.values[n];
        }
        Some(acc)
    }

    /// Per-node control index for feedback lookup: interior nodes keep their
    /// own index, other nodes borrow the nearest interior neighbor's (or 0).
    pub fn feedback_table(&self) -> Vec<u32> {
        let mut table = vec![0u32; self.lattice.len()];
        for node in 0..self.lattice.len() {
            if self.kinds[node] == NodeKind::Interior {
                table[node] = self.policy[node];
                continue;
            }
            let x = self.lattice.point(node);
            let best = self
                .lattice
                .neighbors(node)
                .into_iter()
                .filter(|&n| self.kinds[n] == NodeKind::Interior)
                .min_by(|&a, &b| {
                    let da = dist2(&self.lattice.point(a), &x);
                    let db = dist2(&self.lattice.point(b), &x);
                    da.total_cmp(&db)
                });
            if let Some(n) = best {
                table[node] = self.policy[n];
            }
        }
        table
    }

    /// Largest nodewise `|self - other|` over interior nodes of both grids
    /// sharing a position.
    pub fn max_abs_diff(&self, other: &ValueGrid) -> Option<f64> {
        if self.lattice != other.lattice {
            return None;
        }
        Some(
            self.interior
                .iter()
                .filter(|&&n| other.kinds[n] == NodeKind::Interior)
                .map(|&n| (self.values[n] - other.values[n]).abs())
                .fold(0.0, f64::max),
        )
    }

    /// CSV with columns `node_x1..node_xN,kind,value,policy_index` for interior
    /// and band nodes. Floats are written in shortest round-trip form; band
    /// rows leave `policy_index` empty.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let dim = self.lattice.dim();
        let header: Vec<String> = (1..=dim)
            .map(|i| format!("node_x{i}"))
            .chain(["kind".into(), "value".into(), "policy_index".into()])
            .collect();
        writeln!(w, "{}", header.join(","))?;
        let mut p = vec![0.0; dim];
        for node in 0..self.lattice.len() {
            let kind = self.kinds[node];
            if kind == NodeKind::Exterior {
                continue;
            }
            self.lattice.point_into(node, &mut p);
            for x in &p {
                write!(w, "{x:?},")?;
            }
            write!(w, "{},{:?},", kind.as_str(), self.values[node])?;
            if kind == NodeKind::Interior {
                writeln!(w, "{}", self.policy[node])?;
            } else {
                writeln!(w)?;
            }
        }
        Ok(())
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero() -> ScalarField {
        ScalarField::constant(0.0, 2)
    }

    #[test]
    fn coarse_ball_keeps_origin() {
        let d = Domain::ball(vec![0.0, 0.0], 1.0).unwrap();
        let g = build_grid(&d, &zero(), 0.5).unwrap();
        let origin = g.lattice().nearest(&[0.0, 0.0]);
        assert_eq!(g.lattice().point(origin), vec![0.0, 0.0]);
        assert_eq!(g.kind(origin), NodeKind::Interior);
    }

    #[test]
    fn box_interior_count() {
        let d = Domain::cube(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let g = build_grid(&d, &zero(), 0.25).unwrap();
        assert_eq!(g.interior_nodes().len(), 9);
    }

    #[test]
    fn band_values_come_from_boundary_points() {
        let d = Domain::ball(vec![0.0, 0.0], 1.0).unwrap();
        let g_field = ScalarField::parse("x1", 2).unwrap();
        let g = build_grid(&d, &g_field, 0.1).unwrap();
        let lat = g.lattice();
        let mut checked = 0;
        for node in 0..lat.len() {
            if g.kind(node) != NodeKind::BoundaryBand {
                continue;
            }
            let x = lat.point(node);
            // band value is g at some point on the unit circle near the node
            let v = g.value(node);
            assert!(v.abs() <= 1.0 + 1e-12);
            assert!((v - x[0]).abs() <= 0.1 * 2f64.sqrt() * 2.0 + 1e-12);
            checked += 1;
        }
        assert!(checked > 0);
    }

    #[test]
    fn too_coarse_is_an_error() {
        let d = Domain::annulus(vec![0.0, 0.0], 0.9, 1.0).unwrap();
        assert!(matches!(
            build_grid(&d, &zero(), 0.6),
            Err(GridError::NoInteriorNodes { .. })
        ));
        assert!(matches!(
            build_grid(&d, &zero(), 0.0),
            Err(GridError::InvalidSpacing(_))
        ));
    }

    #[test]
    fn interpolation_is_exact_for_bilinear_functions() {
        let lat = Lattice::covering(&[0.0, 0.0], &[1.0, 1.0], 0.1).unwrap();
        let f = |p: &[f64]| 1.0 + 2.0 * p[0] - p[1] + 0.5 * p[0] * p[1];
        let x = [0.337, 0.771];
        let c = lat.corners(&x).unwrap();
        let v: f64 = c.iter().map(|(n, w)| w * f(&lat.point(n))).sum();
        assert!((v - f(&x)).abs() < 1e-13);
        // on a node only that node contributes
        let c = lat.corners(&[0.3, 0.5]).unwrap();
        assert_eq!(c.len, 1);
        assert!(lat.corners(&[5.0, 0.0]).is_none());
    }

    #[test]
    fn csv_has_header_and_rows() {
        let d = Domain::cube(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let g = build_grid(&d, &ScalarField::constant(1.5, 2), 0.25).unwrap();
        let mut buf = Vec::new();
        g.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("node_x1,node_x2,kind,value,policy_index"));
        let rows: Vec<&str> = lines.collect();
        assert_eq!(rows.iter().filter(|r| r.contains(",interior,")).count(), 9);
        assert!(rows
            .iter()
            .filter(|r| r.contains(",boundary_band,"))
            .all(|r| r.ends_with(",1.5,")));
    }
}
