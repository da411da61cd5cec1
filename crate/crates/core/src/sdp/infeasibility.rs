//! Scoring how strongly an unfinished solve points at infeasibility.

use serde::{Deserialize, Serialize};

/// Snapshot taken at each residual check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterateRecord {
    pub iteration: usize,
    /// Relative primal residual (infinite while `τ` is numerically zero).
    pub primal_residual: f64,
    pub dual_residual: f64,
    /// Homogenizing variable of the embedding.
    pub tau: f64,
    /// `‖x‖∞` of the unnormalized primal iterate `x/τ`.
    pub iterate_norm: f64,
    /// `‖Aᵀy‖∞ / (-bᵀy)` of the current dual direction, when `bᵀy < 0`.
    pub certificate: Option<f64>,
}

/// Certificates this weak or weaker carry no evidence.
const WEAKEST_CERTIFICATE: f64 = 1.0;

/// Score in `[0, 1]` from the iterate history of a solve that did not
/// converge. Two pieces of evidence are combined by taking the larger:
///
/// * stagnation with growth: over the last quarter of the history, the
///   fraction of records whose primal residual sits above `100·tol`, times
///   the fraction of consecutive pairs along which the iterate norm grew.
///   This reaches `1.0` exactly when the residual stalls and the iterates
///   blow up monotonically.
/// * the Farkas certificate of the final record, mapped log-linearly from
///   `1` (worthless) to `tol` (conclusive).
pub fn detect_infeasibility(history: &[IterateRecord], tol: f64) -> f64 {
    if history.is_empty() {
        return 0.0;
    }
    let tail = &history[history.len() - (history.len() / 4).max(1)..];
    let stalled = tail.iter().filter(|r| !(r.primal_residual <= 100.0 * tol)).count() as f64 / tail.len() as f64;
    let growth = if tail.len() < 2 {
        0.0
    } else {
        let grew = tail
            .windows(2)
            .filter(|w| w[1].iterate_norm > w[0].iterate_norm || (w[1].iterate_norm.is_infinite() && w[0].iterate_norm.is_infinite()))
            .count();
        grew as f64 / (tail.len() - 1) as f64
    };
    let heuristic = stalled * growth;

    let certificate = history
        .last()
        .and_then(|r| r.certificate)
        .map(|c| {
            if c <= tol {
                1.0
            } else if c >= WEAKEST_CERTIFICATE {
                0.0
            } else {
                (WEAKEST_CERTIFICATE.ln() - c.ln()) / (WEAKEST_CERTIFICATE.ln() - tol.ln())
            }
        })
        .unwrap_or(0.0);
    heuristic.max(certificate).clamp(0.0, 1.0)
}
