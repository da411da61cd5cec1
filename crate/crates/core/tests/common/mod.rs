//! Shared fixtures: seeded random systems and independent oracles.

#![allow(dead_code)]

pub mod criteria;

use covsynth::model::{QuadraticConstraint, SystemModel};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    a.singular_values().max()
}

pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Random well-damped system with `n ≤ 4`, `m ≤ 2`: `‖A‖₂` in
/// `[0.2, 0.7]`, at most two multiplicative channels with `Σ‖A_i‖₂² ≤ 0.1`
/// and a generic (hence definite) cost weight. The open loop contracts
/// second moments by at least 0.59 per step.
pub fn random_system(seed: u64) -> SystemModel {
    let mut r = rng(seed);
    let n = r.gen_range(1..=4);
    let m = r.gen_range(1..=2);
    let mut a = gaussian(n, n, &mut r);
    let target = r.gen_range(0.2..0.7);
    let norm = spectral_norm(&a);
    if norm > 0.0 {
        a *= target / norm;
    }
    let b = gaussian(n, m, &mut r);
    let channels = r.gen_range(0..=2);
    let multiplicative = (0..channels)
        .map(|_| {
            let ai = gaussian(n, n, &mut r);
            let norm = spectral_norm(&ai);
            ai * (r.gen_range(0.05..0.22) / norm)
        })
        .collect();
    let p = n + m;
    let c = gaussian(p, n, &mut r);
    let d = gaussian(p, m, &mut r);
    SystemModel::new(a, b, multiplicative, c, d)
}

fn block_diag(x: f64, n: usize, u: f64, m: usize) -> DMatrix<f64> {
    let mut q = DMatrix::zeros(n + m, n + m);
    for i in 0..n {
        q[(i, i)] = x;
    }
    for i in n..n + m {
        q[(i, i)] = u;
    }
    q
}

/// `E|u|² ≤ α E|x|² + γ` with `H = I ⪰ 0`. The zero policy satisfies it on
/// a stable plant, so the program stays feasible.
pub fn convex_constraint(model: &SystemModel, seed: u64) -> QuadraticConstraint {
    let mut r = rng(seed ^ 0xC0);
    let alpha = r.gen_range(0.05..0.5);
    let gamma = r.gen_range(0.0..0.5);
    QuadraticConstraint::new(block_diag(-alpha, model.states(), 1.0, model.inputs()), gamma)
}

/// `E|u|² ≥ c`. Indefinite in the input (`H = −I`); feasible on a stable
/// plant since injected noise can raise `E|u|²` freely.
pub fn nonconvex_constraint(model: &SystemModel, seed: u64) -> QuadraticConstraint {
    let mut r = rng(seed ^ 0x0C);
    let c = r.gen_range(0.5..2.0);
    QuadraticConstraint::new(block_diag(0.0, model.states(), -1.0, model.inputs()), -c)
}

/// Grid-search oracle for the scalar stationary LQ problem with cost
/// `x² + u²`: minimize `(1 + K²)/(1 − a₁² − (a + bK)²)` over `K ∈ [−3, 2]`
/// at step 1e−5, only where the closed loop is mean-square stable.
pub fn scalar_grid_oracle(a: f64, b: f64, a1: f64) -> (f64, f64) {
    let mut best = (f64::INFINITY, f64::NAN);
    let steps = 500_000;
    for i in 0..=steps {
        let k = -3.0 + 5.0 * i as f64 / steps as f64;
        let den = 1.0 - a1 * a1 - (a + b * k).powi(2);
        if den > 0.0 {
            let val = (1.0 + k * k) / den;
            if val < best.0 {
                best = (val, k);
            }
        }
    }
    best
}

/// Stationary covariance of `x⁺ = A_cl x + Σ σ_i A_i x + w` by fixed-point
/// iteration from zero.
pub fn lyapunov_fixed_point(acl: &DMatrix<f64>, multiplicative: &[DMatrix<f64>], extra: &DMatrix<f64>) -> DMatrix<f64> {
    let n = acl.nrows();
    let mut x = DMatrix::zeros(n, n);
    for _ in 0..100_000 {
        let mut next = acl * &x * acl.transpose() + DMatrix::identity(n, n) + extra;
        for ai in multiplicative {
            next += ai * &x * ai.transpose();
        }
        let delta = (&next - &x).amax();
        x = next;
        if delta <= 1e-14 * (1.0 + x.amax()) {
            break;
        }
    }
    x
}
