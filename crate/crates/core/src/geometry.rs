//! Bounded open domains: balls, boxes and annuli.
//!
//! All three satisfy an exterior cone condition at every boundary point, so
//! exit times from the open set and from its closure coincide almost surely
//! for the nondegenerate diffusions simulated elsewhere in the crate.

use thiserror::Error;

/// Slack for the closure test `boundary_distance >= -CLOSURE_EPS`.
pub const CLOSURE_EPS: f64 = 1e-12;
const ON_BOUNDARY_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point has dimension {found}, domain has dimension {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("invalid domain: {0}")]
    InvalidParameters(String),
    #[error("segment endpoints must start inside and end outside the domain")]
    SegmentPrecondition,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Domain {
    Ball { center: Vec<f64>, radius: f64 },
    Box { lo: Vec<f64>, hi: Vec<f64> },
    Annulus { center: Vec<f64>, r_inner: f64, r_outer: f64 },
}

/// Where a segment (or ray) first meets the boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryHit {
    pub point: Vec<f64>,
    /// Segment parameter in `[0, 1]` (or distance along a unit ray).
    pub t: f64,
}

#[inline]
fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Roots of `|p + t d - c|^2 = r^2`, ascending, if real.
fn sphere_roots(p: &[f64], d: &[f64], c: &[f64], r: f64) -> Option<(f64, f64)> {
    let a = dot(d, d);
    if a == 0.0 {
        return None;
    }
    let m: Vec<f64> = p.iter().zip(c).map(|(x, y)| x - y).collect();
    let b = dot(&m, d);
    let cc = dot(&m, &m) - r * r;
    let disc = b * b - a * cc;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    // numerically stable pair
    let q = -(b + b.signum() * sq);
    let (t1, t2) = if q == 0.0 {
        (0.0, 0.0)
    } else {
        (q / a, cc / q)
    };
    Some((t1.min(t2), t1.max(t2)))
}

impl Domain {
    pub fn ball(center: Vec<f64>, radius: f64) -> Result<Self, GeometryError> {
        if center.is_empty() || !(radius > 0.0 && radius.is_finite()) {
            return Err(GeometryError::InvalidParameters(format!(
                "ball needs a nonempty center and a positive radius (got {radius})"
            )));
        }
        Ok(Domain::Ball { center, radius })
    }

    pub fn cube(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self, GeometryError> {
        if lo.is_empty() || lo.len() != hi.len() {
            return Err(GeometryError::InvalidParameters(
                "box corners must be nonempty and of equal dimension".into(),
            ));
        }
        if lo.iter().zip(&hi).any(|(a, b)| !(a < b) || !a.is_finite() || !b.is_finite()) {
            return Err(GeometryError::InvalidParameters(
                "box needs lo < hi componentwise".into(),
            ));
        }
        Ok(Domain::Box { lo, hi })
    }

    pub fn annulus(center: Vec<f64>, r_inner: f64, r_outer: f64) -> Result<Self, GeometryError> {
        if center.is_empty() || !(r_inner > 0.0 && r_inner < r_outer && r_outer.is_finite()) {
            return Err(GeometryError::InvalidParameters(format!(
                "annulus needs 0 < r_inner < r_outer (got {r_inner}, {r_outer})"
            )));
        }
        Ok(Domain::Annulus {
            center,
            r_inner,
            r_outer,
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            Domain::Ball { center, .. } | Domain::Annulus { center, .. } => center.len(),
            Domain::Box { lo, .. } => lo.len(),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Domain::Ball { .. } => "ball",
            Domain::Box { .. } => "box",
            Domain::Annulus { .. } => "annulus",
        }
    }

    pub fn check_point(&self, x: &[f64]) -> Result<(), GeometryError> {
        if x.len() != self.dim() {
            return Err(GeometryError::Dimension {
                expected: self.dim(),
                found: x.len(),
            });
        }
        Ok(())
    }

    /// Membership in the open set (strict at the boundary).
    pub fn contains(&self, x: &[f64]) -> Result<bool, GeometryError> {
        self.check_point(x)?;
        Ok(self.inside(x))
    }

    /// Unchecked [`Domain::contains`] for hot loops.
    #[inline]
    pub fn inside(&self, x: &[f64]) -> bool {
        match self {
            Domain::Ball { center, radius } => dist2(x, center) < radius * radius,
            Domain::Box { lo, hi } => x
                .iter()
                .zip(lo.iter().zip(hi))
                .all(|(v, (a, b))| *a < *v && *v < *b),
            Domain::Annulus {
                center,
                r_inner,
                r_outer,
            } => {
                let d = dist2(x, center);
                r_inner * r_inner < d && d < r_outer * r_outer
            }
        }
    }

    /// Membership in the closure, up to `CLOSURE_EPS`.
    pub fn in_closure(&self, x: &[f64]) -> bool {
        self.boundary_distance(x) >= -CLOSURE_EPS
    }

    /// Signed Euclidean distance to the boundary: positive inside, negative
    /// outside.
    pub fn boundary_distance(&self, x: &[f64]) -> f64 {
        match self {
            Domain::Ball { center, radius } => radius - dist2(x, center).sqrt(),
            Domain::Box { lo, hi } => {
                if self.inside(x) {
                    x.iter()
                        .zip(lo.iter().zip(hi))
                        .map(|(v, (a, b))| (v - a).min(b - v))
                        .fold(f64::INFINITY, f64::min)
                } else {
                    let out2: f64 = x
                        .iter()
                        .zip(lo.iter().zip(hi))
                        .map(|(v, (a, b))| {
                            let e = (a - v).max(v - b).max(0.0);
                            e * e
                        })
                        .sum();
                    -out2.sqrt()
                }
            }
            Domain::Annulus {
                center,
                r_inner,
                r_outer,
            } => {
                let r = dist2(x, center).sqrt();
                (r - r_inner).min(r_outer - r)
            }
        }
    }

    /// Tight axis-aligned box containing the closure.
    pub fn bounding_box(&self) -> (Vec<f64>, Vec<f64>) {
        match self {
            Domain::Ball { center, radius: r }
            | Domain::Annulus {
                center, r_outer: r, ..
            } => (
                center.iter().map(|c| c - r).collect(),
                center.iter().map(|c| c + r).collect(),
            ),
            Domain::Box { lo, hi } => (lo.clone(), hi.clone()),
        }
    }

    pub fn diameter(&self) -> f64 {
        match self {
            Domain::Ball { radius, .. } => 2.0 * radius,
            Domain::Annulus { r_outer, .. } => 2.0 * r_outer,
            Domain::Box { lo, hi } => dist2(lo, hi).sqrt(),
        }
    }

    /// Radius of the largest ball inside the domain.
    pub fn inradius(&self) -> f64 {
        match self {
            Domain::Ball { radius, .. } => *radius,
            Domain::Annulus {
                r_inner, r_outer, ..
            } => 0.5 * (r_outer - r_inner),
            Domain::Box { lo, hi } => lo
                .iter()
                .zip(hi)
                .map(|(a, b)| 0.5 * (b - a))
                .fold(f64::INFINITY, f64::min),
        }
    }

    /// Distance from `x` along the direction `d` (any length; the result is
    /// in units of `|d|`) to the first boundary crossing. Only meaningful for
    /// `x` in the closure; returns `None` when the ray never meets the
    /// boundary, which cannot happen for a bounded domain and a nonzero `d`.
    pub fn ray_exit(&self, x: &[f64], d: &[f64]) -> Option<f64> {
        match self {
            Domain::Ball { center, radius } => {
                sphere_roots(x, d, center, *radius).map(|(_, t2)| t2.max(0.0))
            }
            Domain::Annulus {
                center,
                r_inner,
                r_outer,
            } => {
                let outer = sphere_roots(x, d, center, *r_outer).map(|(_, t2)| t2.max(0.0))?;
                let inner = sphere_roots(x, d, center, *r_inner)
                    .map(|(t1, _)| t1)
                    .filter(|&t1| t1 >= 0.0);
                Some(inner.map_or(outer, |t| t.min(outer)))
            }
            Domain::Box { lo, hi } => {
                let mut t = f64::INFINITY;
                for i in 0..x.len() {
                    if d[i] > 0.0 {
                        t = t.min((hi[i] - x[i]) / d[i]);
                    } else if d[i] < 0.0 {
                        t = t.min((lo[i] - x[i]) / d[i]);
                    }
                }
                t.is_finite().then(|| t.max(0.0))
            }
        }
    }

    /// Intersection of the segment `[x_in, x_out]` with the boundary, where
    /// `x_in` is inside and `x_out` outside. Closed form per kind, with a
    /// bisection fallback should the closed form miss the boundary by more
    /// than `1e-9`.
    pub fn project_to_boundary(&self, x_in: &[f64], x_out: &[f64]) -> Result<BoundaryHit, GeometryError> {
        self.check_point(x_in)?;
        self.check_point(x_out)?;
        if !self.inside(x_in) || self.inside(x_out) {
            return Err(GeometryError::SegmentPrecondition);
        }
        Ok(self.segment_exit(x_in, x_out))
    }

    /// Unchecked [`Domain::project_to_boundary`].
    pub(crate) fn segment_exit(&self, x_in: &[f64], x_out: &[f64]) -> BoundaryHit {
        let d: Vec<f64> = x_out.iter().zip(x_in).map(|(b, a)| b - a).collect();
        let at = |t: f64| -> Vec<f64> { x_in.iter().zip(&d).map(|(a, v)| a + t * v).collect() };
        if let Some(t) = self.ray_exit(x_in, &d) {
            let t = t.clamp(0.0, 1.0);
            let p = at(t);
            if self.boundary_distance(&p).abs() <= ON_BOUNDARY_TOL {
                return BoundaryHit { point: p, t };
            }
        }
        // bisection on the membership indicator
        let (mut a, mut b) = (0.0f64, 1.0f64);
        while b - a > 1e-12 {
            let m = 0.5 * (a + b);
            if self.inside(&at(m)) {
                a = m;
            } else {
                b = m;
            }
        }
        let t = 0.5 * (a + b);
        BoundaryHit { point: at(t), t }
    }

    /// Nearest boundary point and the outward unit normal there.
    pub fn closest_boundary_point(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let radial = |center: &[f64]| -> Vec<f64> {
            let mut v: Vec<f64> = x.iter().zip(center).map(|(a, c)| a - c).collect();
            let n = dot(&v, &v).sqrt();
            if n == 0.0 {
                v.iter_mut().for_each(|e| *e = 0.0);
                v[0] = 1.0;
            } else {
                v.iter_mut().for_each(|e| *e /= n);
            }
            v
        };
        match self {
            Domain::Ball { center, radius } => {
                let u = radial(center);
                let p = center.iter().zip(&u).map(|(c, e)| c + radius * e).collect();
                (p, u)
            }
            Domain::Annulus {
                center,
                r_inner,
                r_outer,
            } => {
                let u = radial(center);
                let r = dist2(x, center).sqrt();
                if r_outer - r <= r - r_inner {
                    let p = center.iter().zip(&u).map(|(c, e)| c + r_outer * e).collect();
                    (p, u)
                } else {
                    let p = center.iter().zip(&u).map(|(c, e)| c + r_inner * e).collect();
                    (p, u.iter().map(|e| -e).collect())
                }
            }
            Domain::Box { lo, hi } => {
                let n = x.len();
                if self.inside(x) {
                    let mut best = (f64::INFINITY, 0usize, 1.0f64);
                    for i in 0..n {
                        if x[i] - lo[i] < best.0 {
                            best = (x[i] - lo[i], i, -1.0);
                        }
                        if hi[i] - x[i] < best.0 {
                            best = (hi[i] - x[i], i, 1.0);
                        }
                    }
                    let (_, i, s) = best;
                    let mut p = x.to_vec();
                    p[i] = if s > 0.0 { hi[i] } else { lo[i] };
                    let mut normal = vec![0.0; n];
                    normal[i] = s;
                    (p, normal)
                } else {
                    let p: Vec<f64> = (0..n).map(|i| x[i].clamp(lo[i], hi[i])).collect();
                    let mut normal: Vec<f64> = x.iter().zip(&p).map(|(a, b)| a - b).collect();
                    let len = dot(&normal, &normal).sqrt();
                    if len > 0.0 {
                        normal.iter_mut().for_each(|e| *e /= len);
                    } else {
                        // on a face: pick the first active one
                        normal.iter_mut().for_each(|e| *e = 0.0);
                        if let Some(i) = (0..n).find(|&i| p[i] == lo[i] || p[i] == hi[i]) {
                            normal[i] = if p[i] == hi[i] { 1.0 } else { -1.0 };
                        }
                    }
                    (p, normal)
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_ball() -> Domain {
        Domain::ball(vec![0.0, 0.0], 1.0).unwrap()
    }

    fn unit_square() -> Domain {
        Domain::cube(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap()
    }

    fn ring() -> Domain {
        Domain::annulus(vec![0.0, 0.0], 0.5, 1.0).unwrap()
    }

    #[test]
    fn membership_is_open() {
        assert!(unit_ball().contains(&[0.0, 0.0]).unwrap());
        assert!(!unit_ball().contains(&[0.6, 0.8]).unwrap());
        assert!(!unit_square().contains(&[0.5, 1.0]).unwrap());
        assert!(unit_ball().in_closure(&[0.6, 0.8]));
        assert!(!ring().contains(&[0.0, 0.0]).unwrap());
        assert!(matches!(
            unit_ball().contains(&[0.0]),
            Err(GeometryError::Dimension { expected: 2, found: 1 })
        ));
    }

    #[test]
    fn signed_distances() {
        assert_eq!(unit_ball().boundary_distance(&[0.0, 0.0]), 1.0);
        assert_eq!(unit_ball().boundary_distance(&[2.0, 0.0]), -1.0);
        assert_eq!(ring().boundary_distance(&[0.75, 0.0]), 0.25);
        assert_eq!(ring().boundary_distance(&[0.25, 0.0]), -0.25);
        assert_eq!(unit_square().boundary_distance(&[0.5, 0.25]), 0.25);
        assert!((unit_square().boundary_distance(&[2.0, 2.0]) + 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn bounding_boxes() {
        let (lo, hi) = unit_ball().bounding_box();
        assert_eq!((lo, hi), (vec![-1.0, -1.0], vec![1.0, 1.0]));
        assert_eq!(unit_square().bounding_box(), (vec![0.0, 0.0], vec![1.0, 1.0]));
        assert_eq!(ring().bounding_box(), (vec![-1.0, -1.0], vec![1.0, 1.0]));
    }

    #[test]
    fn projections() {
        let hit = unit_ball().project_to_boundary(&[0.0, 0.0], &[2.0, 0.0]).unwrap();
        assert!((hit.point[0] - 1.0).abs() < 1e-15 && hit.point[1].abs() < 1e-15);
        assert!((hit.t - 0.5).abs() < 1e-15);
        let hit = unit_square().project_to_boundary(&[0.5, 0.5], &[0.5, 1.5]).unwrap();
        assert_eq!(hit.point, vec![0.5, 1.0]);
        let hit = ring().project_to_boundary(&[0.75, 0.0], &[1.5, 0.0]).unwrap();
        assert!((hit.point[0] - 1.0).abs() < 1e-15);
        // crossing into the hole
        let hit = ring().project_to_boundary(&[0.75, 0.0], &[0.0, 0.0]).unwrap();
        assert!((hit.point[0] - 0.5).abs() < 1e-15);
        assert_eq!(
            unit_ball().project_to_boundary(&[2.0, 0.0], &[3.0, 0.0]),
            Err(GeometryError::SegmentPrecondition)
        );
    }

    #[test]
    fn ray_exit_through_hole() {
        // from (0.75, 0) towards -x the first crossing is the inner circle
        let t = ring().ray_exit(&[0.75, 0.0], &[-1.0, 0.0]).unwrap();
        assert!((t - 0.25).abs() < 1e-15);
        // tangent to the hole: passes it and leaves through the outer circle
        let t = ring().ray_exit(&[0.75, 0.6], &[-1.0, 0.0]).unwrap();
        assert!((t - (0.75 + 0.8)).abs() < 1e-12);
    }

    #[test]
    fn closest_points_and_normals() {
        let (p, n) = unit_ball().closest_boundary_point(&[0.5, 0.0]);
        assert_eq!((p, n), (vec![1.0, 0.0], vec![1.0, 0.0]));
        let (p, n) = ring().closest_boundary_point(&[0.6, 0.0]);
        assert_eq!((p, n), (vec![0.5, 0.0], vec![-1.0, 0.0]));
        let (p, n) = unit_square().closest_boundary_point(&[0.5, 0.9]);
        assert!((p[1] - 1.0).abs() < 1e-15);
        assert_eq!(n, vec![0.0, 1.0]);
    }

    #[test]
    fn invalid_parameters() {
        assert!(Domain::ball(vec![0.0], -1.0).is_err());
        assert!(Domain::cube(vec![0.0, 1.0], vec![1.0, 1.0]).is_err());
        assert!(Domain::annulus(vec![0.0, 0.0], 1.0, 0.5).is_err());
    }
}
