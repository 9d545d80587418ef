//! Sparse linear systems arising from frozen policies.
//!
//! Rows are stored compressed; the default solve is a sparse LU from `faer`,
//! with Gauss–Seidel available for small systems and cross-checks.

use faer::prelude::*;
use faer::sparse::{SparseColMat, Triplet};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinError {
    #[error("sparse factorization failed: {0}")]
    Factorization(String),
    #[error("solution contains non-finite values")]
    NonFinite,
}

/// Square sparse system `A u = b` assembled row by row.
#[derive(Debug, Clone, Default)]
pub struct SparseSystem {
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
    rhs: Vec<f64>,
}

impl SparseSystem {
    pub fn with_capacity(rows: usize, nnz: usize) -> Self {
        let mut row_ptr = Vec::with_capacity(rows + 1);
        row_ptr.push(0);
        SparseSystem {
            row_ptr,
            cols: Vec::with_capacity(nnz),
            vals: Vec::with_capacity(nnz),
            rhs: Vec::with_capacity(rows),
        }
    }

    /// Appends a row. Repeated columns are summed by the factorization and by
    /// Gauss–Seidel alike.
    pub fn push_row(&mut self, entries: impl IntoIterator<Item = (u32, f64)>, rhs: f64) {
        for (c, v) in entries {
            self.cols.push(c);
            self.vals.push(v);
        }
        self.row_ptr.push(self.cols.len());
        self.rhs.push(rhs);
    }

    pub fn rows(&self) -> usize {
        self.rhs.len()
    }

    fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()]
            .iter()
            .zip(&self.vals[r])
            .map(|(&c, &v)| (c as usize, v))
    }

    /// `max_i |(A u - b)_i|`.
    pub fn residual(&self, u: &[f64]) -> f64 {
        (0..self.rows())
            .map(|i| {
                let ax: f64 = self.row(i).map(|(c, v)| v * u[c]).sum();
                (ax - self.rhs[i]).abs()
            })
            .fold(0.0, f64::max)
    }

    pub fn solve_direct(&self) -> Result<Vec<f64>, LinError> {
        let n = self.rows();
        if n == 0 {
            return Ok(Vec::new());
        }
        // sequential factorization keeps results independent of the pool size
        faer::set_global_parallelism(faer::Par::Seq);
        let triplets: Vec<Triplet<usize, usize, f64>> = (0..n)
            .flat_map(|i| self.row(i).map(move |(c, v)| Triplet::new(i, c, v)))
            .collect();
        let a = SparseColMat::<usize, f64>::try_new_from_triplets(n, n, &triplets)
            .map_err(|e| LinError::Factorization(format!("{e:?}")))?;
        let lu = a
            .sp_lu()
            .map_err(|e| LinError::Factorization(format!("{e:?}")))?;
        let b = Col::<f64>::from_fn(n, |i| self.rhs[i]);
        let x = lu.solve(&b);
        let out: Vec<f64> = (0..n).map(|i| x[i]).collect();
        if out.iter().all(|v| v.is_finite()) {
            Ok(out)
        } else {
            Err(LinError::NonFinite)
        }
    }

    /// Gauss–Seidel sweeps in row order from `u`, until the largest update
    /// falls below `tol` or `max_sweeps` is reached. Returns the sweep count
    /// and the final update size.
    pub fn gauss_seidel(&self, u: &mut [f64], tol: f64, max_sweeps: usize) -> (usize, f64) {
        let mut change = f64::INFINITY;
        for sweep in 1..=max_sweeps {
            change = 0.0;
            for i in 0..self.rows() {
                let mut diag = 0.0;
                let mut off = 0.0;
                for (c, v) in self.row(i) {
                    if c == i {
                        diag += v;
                    } else {
                        off += v * u[c];
                    }
                }
                let new = (self.rhs[i] - off) / diag;
                change = f64::max(change, (new - u[i]).abs());
                u[i] = new;
            }
            if change <= tol {
                return (sweep, change);
            }
        }
        (max_sweeps, change)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// 1-D Dirichlet Laplacian `-u'' = 1` on `n` interior points, `h = 1/(n+1)`.
    fn laplacian(n: usize) -> SparseSystem {
        let h = 1.0 / (n + 1) as f64;
        let mut s = SparseSystem::with_capacity(n, 3 * n);
        for i in 0..n {
            let mut row = vec![(i as u32, 2.0 / (h * h))];
            if i > 0 {
                row.push((i as u32 - 1, -1.0 / (h * h)));
            }
            if i + 1 < n {
                row.push((i as u32 + 1, -1.0 / (h * h)));
            }
            s.push_row(row, 1.0);
        }
        s
    }

    #[test]
    fn direct_solve_is_exact_for_quadratic_solution() {
        let n = 49;
        let s = laplacian(n);
        let u = s.solve_direct().unwrap();
        let h = 1.0 / (n + 1) as f64;
        for (i, v) in u.iter().enumerate() {
            let x = (i + 1) as f64 * h;
            assert!((v - 0.5 * x * (1.0 - x)).abs() < 1e-10);
        }
        assert!(s.residual(&u) < 1e-8);
    }

    #[test]
    fn gauss_seidel_agrees_with_direct() {
        let s = laplacian(15);
        let direct = s.solve_direct().unwrap();
        let mut u = vec![0.0; 15];
        let (_, change) = s.gauss_seidel(&mut u, 1e-14, 100_000);
        assert!(change <= 1e-14);
        for (a, b) in u.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn repeated_columns_are_summed() {
        let mut s = SparseSystem::with_capacity(1, 2);
        s.push_row([(0, 1.0), (0, 1.0)], 4.0);
        assert_eq!(s.solve_direct().unwrap(), vec![2.0]);
        let mut u = vec![0.0];
        s.gauss_seidel(&mut u, 0.0, 3);
        assert_eq!(u, vec![2.0]);
    }
}
