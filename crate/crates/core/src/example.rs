//! The two-state worked example: an unstable plant with a multiplicative
//! disturbance on the state and an indefinite input-energy constraint
//! `u² <= 4(x₁² + x₂²)` in expectation.
//!
//! The multiplicative term enters with variance 2, i.e. the noise adds
//! `0.5·X` to the state covariance each step. Reported costs are root mean
//! square values, `sqrt(Σ E zᵀz)`, so they compare with the square root of
//! the SDP objective.

use nalgebra::DMatrix;

use crate::model::{load_problem, Problem};

pub const PROBLEM_JSON: &str = include_str!("../data/example.json");

/// RMS cost with the input-energy constraint.
pub const CONSTRAINED_COST: f64 = 42.9116;
/// RMS cost without it.
pub const UNCONSTRAINED_COST: f64 = 23.9361;
/// Printed gain, to four decimals.
pub const PRINTED_GAIN: [f64; 2] = [0.7908, -2.5155];

/// The printed optimal joint covariance. The source shows `+283.7` in the
/// lower-left corner, which makes it asymmetric; the gain and `Π = 0` only
/// hold with `R = (-283.7, -674.8)`, so both off-diagonal copies carry the
/// minus sign here.
pub fn printed_covariance() -> DMatrix<f64> {
    DMatrix::from_row_slice(
        3,
        3,
        &[58.8, 131.2, -283.7, 131.2, 309.5, -674.8, -283.7, -674.8, 1473.1],
    )
}

pub fn problem() -> Problem {
    load_problem(PROBLEM_JSON).expect("embedded example is valid")
}

/// Same problem with the constraint removed.
pub fn unconstrained_problem() -> Problem {
    let mut source = problem().source;
    source.constraints.clear();
    Problem::from_file(source).expect("embedded example is valid")
}
