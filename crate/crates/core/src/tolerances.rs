//! Numerical thresholds shared across the crate.

/// Matrices are accepted as symmetric when `max|M - Mᵀ| <= SYMMETRY·(1 + max|M|)`.
pub const SYMMETRY: f64 = 1e-9;

/// `[C D]ᵀ[C D]` counts as positive definite when its smallest eigenvalue is at
/// least `DEFINITENESS · trace/(n+m)`.
pub const DEFINITENESS: f64 = 1e-9;

/// Default relative rank cutoff for pseudoinverses.
pub const RANK: f64 = 1e-10;

/// Smallest eigenvalue allowed on a covariance block before it is rejected as
/// not PSD, relative to `1 + max|λ|`.
pub const PSD: f64 = 1e-7;

/// Negative eigenvalues of an injected-noise covariance down to this level
/// (relative) are clamped to zero when forming its square-root factor.
pub const PI_FACTOR_CLAMP: f64 = 1e-10;

/// State norm treated as divergence in simulation.
pub const OVERFLOW_NORM: f64 = 1e12;
