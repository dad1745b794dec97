//! Second-order methods for monotone and Minty variational inequalities
//! driven by inexact Jacobians.
//!
//! The crate is organised bottom-up:
//!
//! * [`domain`]: Euclidean feasible sets (ball, box, full space), projections
//!   and closed-form linear suprema.
//! * [`operators`]: the operator oracle with evaluation counters and a small
//!   zoo of test problems, including the cubic-regularised bilinear game.
//! * [`jacobian`]: Jacobian approximations. Exact/dense, zero, and the
//!   limited-memory Broyden family stored in factored `J0 + U C V^T` form
//!   with Woodbury shifted solves.
//! * [`model`]: the regularised first-order model and its high-order
//!   generalisation.
//! * [`subsolve`]: subproblem solvers with verified acceptance criteria.
//! * [`solve`]: the dual-extrapolation drivers (plain, restarted, min-max,
//!   high-order) and the first-order baselines.
//! * [`metrics`]: gap, residue, restricted gap and rate fitting.
//! * [`verify`]: self-contained invariant suites used by the `check` command.

pub mod domain;
pub mod error;
pub mod jacobian;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod operators;
pub mod rng;
pub mod solve;
pub mod subsolve;
pub mod verify;

pub use domain::{Domain, Vector};
pub use error::{Error, Result};
pub use nalgebra::DMatrix;
