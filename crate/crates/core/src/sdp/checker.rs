//! Post-hoc feasibility check that does not trust solver internals.

use nalgebra::DMatrix;
use serde::Serialize;

use super::problem::ConicSdp;
use crate::numerics::{sym_eig, NumericsError};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeasibilityCheck {
    /// `‖𝒜(V) − b‖∞`
    pub equality_residual: f64,
    /// `‖b‖∞`, for relative comparisons.
    pub rhs_norm: f64,
    /// Largest `g·x − h` over the inequality rows (negative when all slack).
    pub worst_inequality: f64,
    /// Smallest eigenvalue of each block.
    pub min_eigenvalues: Vec<f64>,
    pub objective: f64,
}

impl FeasibilityCheck {
    pub fn min_eigenvalue(&self) -> f64 {
        self.min_eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Whether the candidate satisfies the acceptance test of an optimal
    /// solve at tolerance `eps`, with `psd_tol` slack on the eigenvalues.
    pub fn passes(&self, eps: f64, psd_tol: f64) -> bool {
        self.equality_residual <= eps * (1.0 + self.rhs_norm) * 10.0
            && self.worst_inequality <= eps * 10.0
            && self.min_eigenvalue() >= -psd_tol
    }
}

pub fn check_solution(problem: &ConicSdp, blocks: &[DMatrix<f64>]) -> Result<FeasibilityCheck, NumericsError> {
    let x = problem.blocks_to_vector(blocks);
    let equality_residual = problem
        .equalities
        .iter()
        .map(|r| (r.dot(&x) - r.rhs).abs())
        .fold(0.0f64, f64::max);
    let rhs_norm = problem.equalities.iter().map(|r| r.rhs.abs()).fold(0.0f64, f64::max);
    let worst_inequality = problem
        .inequalities
        .iter()
        .map(|r| r.dot(&x) - r.rhs)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut min_eigenvalues = Vec::with_capacity(blocks.len());
    for b in blocks {
        min_eigenvalues.push(sym_eig(&crate::numerics::symmetrize(b))?.min());
    }
    Ok(FeasibilityCheck {
        equality_residual,
        rhs_norm,
        worst_inequality: if worst_inequality.is_finite() { worst_inequality } else { 0.0 },
        min_eigenvalues,
        objective: problem.objective(&x),
    })
}
