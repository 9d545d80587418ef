//! Numerical solvers for the Dirichlet problem
//!
//! ```text
//! 1/2 P+(D^2 u) + f = 0  in D,      u = g  on the boundary of D,
//! ```
//!
//! where `P+` is Pucci's maximal operator with ellipticity `0 < lam <= Lam`.
//! The solution is the value of a controlled diffusion,
//! `u(x) = sup E[ g(X_tau) + int_0^tau f(X_t) dt ]`, over diffusion
//! coefficients `sigma` with `sigma sigma^T` spectrum in `[lam, Lam]`.
//!
//! Three independent routes are provided:
//!
//! * [`simulate`]: Monte Carlo for a fixed (constant or feedback) control;
//!   any such estimate is a lower bound for `u`.
//! * [`dpp`]: a semi-Lagrangian dynamic-programming scheme on a lattice.
//! * [`fd`]: a wide-stencil monotone finite-difference scheme (`N = 2`).
//!
//! [`config`] and [`bench`] drive them from a TOML file, as does the
//! `pucci-kac` binary.

pub mod bench;
pub mod config;
pub mod dpp;
pub mod exprlang;
pub mod fd;
pub mod geometry;
pub mod grid;
pub mod linsolve;
pub mod simulate;
pub mod stats;
pub mod symmat;

/// Guide chapters, compiled here so that their snippets run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/operator.md")]
    mod operator {}
    #[doc = include_str!("../../../book/src/domains.md")]
    mod domains {}
    #[doc = include_str!("../../../book/src/monte_carlo.md")]
    mod monte_carlo {}
    #[doc = include_str!("../../../book/src/dpp.md")]
    mod dpp {}
    #[doc = include_str!("../../../book/src/finite_differences.md")]
    mod finite_differences {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
