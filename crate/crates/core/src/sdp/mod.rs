//! A first-order solver for block-PSD conic programs.
//!
//! Problems are posed over the concatenated scaled vectorizations of one or
//! more symmetric blocks, with sparse equality rows and `<=` inequality rows.
//! The solver is an operator-splitting method applied to the homogeneous
//! self-dual embedding, so it can return either a solution or evidence that
//! none exists.

mod anderson;
mod banded;
mod checker;
mod infeasibility;
mod presolve;
mod problem;
mod solver;
mod sparse;

pub use banded::{BandedCholesky, BandedError};
pub use checker::{check_solution, FeasibilityCheck};
pub use infeasibility::{detect_infeasibility, IterateRecord};
pub use presolve::{presolve, PresolveError, Presolved, Scaling};
pub use problem::{ConicSdp, LinearRow};
pub use solver::{solve, solve_presolved, SdpSolution, SolveState, SolveStatus, SolverOptions};
