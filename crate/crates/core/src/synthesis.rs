//! From control problems to conic programs and back.
//!
//! The decision variable is the joint covariance `V_k` of state and input.
//! Its state block obeys the linear recursion
//! `X_{k+1} = [A B] V_k [A B]ᵀ + Σ A_i X_k A_iᵀ + I`, the cost is linear in
//! `V_k` and every quadratic constraint becomes `tr(Q_j V_k) <= γ_j(k)`, so
//! the optimal control problem is a semidefinite program. A policy is read
//! back off the optimal `V` via `K = Rᵀ X⁺` and the Schur complement
//! `Π = U − Rᵀ X⁺ R`.

use log::{debug, warn};
use nalgebra::DMatrix;
use serde::Serialize;
use thiserror::Error;

use crate::model::{validate, AffinePolicy, Gamma, JointCovariance, Mode, Problem, QuadraticConstraint, SystemModel, ValidationReport};
use crate::numerics::{self, pinv, project_psd, sym_eig, NumericsError, SymVec};
use crate::sdp::{check_solution, solve, ConicSdp, FeasibilityCheck, PresolveError, SolveState, SolveStatus, SolverOptions};
use crate::tolerances;

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error("invalid problem: {0}")]
    Invalid(ValidationReport),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("horizon must be at least 1")]
    Horizon,
    #[error("stationary synthesis needs a scalar gamma (constraint {0} has a schedule)")]
    Schedule(usize),
    #[error(transparent)]
    Presolve(#[from] PresolveError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Right-hand side of the covariance recursion:
/// `[A B] V [A B]ᵀ + Σ A_i X A_iᵀ + I`.
pub fn propagate_covariance(model: &SystemModel, v: &JointCovariance) -> Result<DMatrix<f64>, SynthesisError> {
    let n = model.states();
    let m = model.inputs();
    if v.states() != n || v.inputs() != m {
        return Err(SynthesisError::Dimension(format!(
            "covariance is ({}, {}) but the model has n = {n}, m = {m}",
            v.states(),
            v.inputs()
        )));
    }
    Ok(recursion_map(model, v.matrix()) + DMatrix::identity(n, n))
}

/// `[A B] V [A B]ᵀ + Σ A_i X A_iᵀ` without the additive-noise term.
fn recursion_map(model: &SystemModel, v: &DMatrix<f64>) -> DMatrix<f64> {
    let n = model.states();
    let ab = model.ab();
    let x = v.view((0, 0), (n, n));
    let mut out = &ab * v * ab.transpose();
    for ai in &model.multiplicative {
        out += ai * x * ai.transpose();
    }
    numerics::symmetrize(&out)
}

/// Coefficients of a linear map from `d×d` blocks to `n×n` matrices on each
/// svec coordinate: entry `[r][t]` is the `r`-th svec coordinate of the
/// image of the `t`-th basis matrix.
fn map_columns(d: usize, n: usize, map: impl Fn(&DMatrix<f64>) -> DMatrix<f64>) -> Vec<Vec<f64>> {
    let sv = SymVec::new(d);
    let sn = SymVec::new(n);
    let mut rows = vec![vec![0.0; sv.len()]; sn.len()];
    let mut e = vec![0.0; sv.len()];
    for t in 0..sv.len() {
        e[t] = 1.0;
        let image = sn.svec(&map(&sv.smat(&e)));
        for (r, val) in image.into_iter().enumerate() {
            rows[r][t] = val;
        }
        e[t] = 0.0;
    }
    rows
}

fn recursion_columns(model: &SystemModel) -> Vec<Vec<f64>> {
    map_columns(model.states() + model.inputs(), model.states(), |v| recursion_map(model, v))
}

/// Append `X_to = map(V_from) + offset` to the program, one row per svec
/// coordinate of `X_to`.
fn push_recursion(sdp: &mut ConicSdp, columns: &[Vec<f64>], offset: &DMatrix<f64>, from: usize, to: usize) {
    let sn = SymVec::new(offset.nrows());
    let rhs = sn.svec(offset);
    let from_off = sdp.offsets()[from];
    for (r, coeffs) in columns.iter().enumerate() {
        let (i, j) = sn.entry(r);
        let mut terms: Vec<(usize, f64)> = coeffs
            .iter()
            .enumerate()
            .filter(|&(_, &c)| c != 0.0)
            .map(|(t, &c)| (from_off + t, -c))
            .collect();
        terms.push((sdp.coordinate(to, i, j), 1.0));
        sdp.add_equality(terms, rhs[r]);
    }
}

fn check_valid(model: &SystemModel, constraints: &[QuadraticConstraint], horizon: Option<usize>) -> Result<(), SynthesisError> {
    let report = validate(model, constraints, horizon);
    if report.is_valid() {
        Ok(())
    } else {
        Err(SynthesisError::Invalid(report))
    }
}

fn stationary_sdp(model: &SystemModel, constraints: &[QuadraticConstraint], cost: DMatrix<f64>) -> Result<ConicSdp, SynthesisError> {
    let n = model.states();
    let d = n + model.inputs();
    let mut sdp = ConicSdp::new(vec![d]);
    sdp.cost[0] = cost;
    push_recursion(&mut sdp, &recursion_columns(model), &DMatrix::identity(n, n), 0, 0);
    for (j, con) in constraints.iter().enumerate() {
        let gamma = match con.gamma {
            Gamma::Constant(g) => g,
            Gamma::Schedule(_) => return Err(SynthesisError::Schedule(j)),
        };
        let q = numerics::symmetrize(&con.q);
        sdp.add_inequality(sdp.trace_terms(0, &q), gamma);
    }
    Ok(sdp)
}

/// Single-block program `min ⟨[C D]ᵀ[C D], V⟩` subject to the stationary
/// recursion `X = [A B]V[A B]ᵀ + Σ A_i X A_iᵀ + I`, `tr(Q_j V) <= γ_j` and
/// `V ⪰ 0`.
pub fn build_stationary_sdp(model: &SystemModel, constraints: &[QuadraticConstraint]) -> Result<ConicSdp, SynthesisError> {
    check_valid(model, constraints, None)?;
    stationary_sdp(model, constraints, model.cost_weight())
}

/// `N`-block program: `X_0 = 0`, the recursion from block `k` to `k + 1`
/// for `k = 0..N−2`, `tr(Q_j V_k) <= γ_j(k)` for every step and cost
/// `(1/N) Σ_k ⟨[C D]ᵀ[C D], V_k⟩`.
pub fn build_finite_horizon_sdp(model: &SystemModel, constraints: &[QuadraticConstraint], horizon: usize) -> Result<ConicSdp, SynthesisError> {
    let d = model.states() + model.inputs();
    finite_sdp(model, constraints, horizon, &vec![DMatrix::identity(d, d); horizon], false)
}

/// The finite-horizon program in the variables `Ṽ_k` of the congruence
/// `V_k = T_k Ṽ_k T_kᵀ`. Each `T_k` must be invertible and block lower
/// triangular, `[[L_k, 0], [·, ·]]`, so that `X_k = L_k X̃_k L_kᵀ` and the
/// rows keep their meaning. PSD-ness is preserved, so the optimum maps
/// back exactly; a basis that whitens the expected trajectory makes the
/// chain of recursions far better conditioned for a splitting method.
///
/// Block 0 is reduced to `U_0` alone (`m × m`): `X_0 = 0` and `V_0 ⪰ 0`
/// force `R_0 = 0`, so `V_0 = diag(0, U_0)` for any such `T_0`. Keeping the
/// full block would leave the multipliers of `X_0 = 0` unbounded, which
/// stalls the splitting iteration. Use [`first_blocks_to_covariances`] to
/// map a solution back.
pub fn build_finite_horizon_sdp_in_basis(
    model: &SystemModel,
    constraints: &[QuadraticConstraint],
    horizon: usize,
    basis: &[DMatrix<f64>],
) -> Result<ConicSdp, SynthesisError> {
    finite_sdp(model, constraints, horizon, basis, true)
}

/// `V_k = T_k Ṽ_k T_kᵀ` for a solution of
/// [`build_finite_horizon_sdp_in_basis`], with block 0 read as `U_0`.
pub fn first_blocks_to_covariances(model: &SystemModel, basis: &[DMatrix<f64>], blocks: &[DMatrix<f64>]) -> Vec<DMatrix<f64>> {
    let n = model.states();
    let d = n + model.inputs();
    blocks
        .iter()
        .zip(basis)
        .enumerate()
        .map(|(k, (b, t))| {
            if k == 0 {
                let mut v = DMatrix::zeros(d, d);
                v.view_mut((n, n), (d - n, d - n)).copy_from(b);
                v
            } else {
                numerics::symmetrize(&(t * b * t.transpose()))
            }
        })
        .collect()
}

/// `diag(0, U)` for a `U` block.
fn embed_input_block(u: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    let m = u.nrows();
    let mut v = DMatrix::zeros(n + m, n + m);
    v.view_mut((n, n), (m, m)).copy_from(u);
    v
}

fn finite_sdp(
    model: &SystemModel,
    constraints: &[QuadraticConstraint],
    horizon: usize,
    basis: &[DMatrix<f64>],
    reduce_first: bool,
) -> Result<ConicSdp, SynthesisError> {
    if horizon == 0 {
        return Err(SynthesisError::Horizon);
    }
    check_valid(model, constraints, Some(horizon))?;
    let n = model.states();
    let m = model.inputs();
    let d = n + m;
    if basis.len() != horizon || basis.iter().any(|t| t.shape() != (d, d)) {
        return Err(SynthesisError::Dimension(format!("basis needs {horizon} matrices of size {d}x{d}")));
    }
    if basis.iter().any(|t| t.view((0, n), (n, d - n)).iter().any(|&x| x != 0.0)) {
        return Err(SynthesisError::Dimension("basis must be block lower triangular".into()));
    }
    let mut inverses = Vec::with_capacity(horizon);
    for t in basis {
        let l = t.view((0, 0), (n, n)).into_owned();
        inverses.push(l.try_inverse().ok_or_else(|| SynthesisError::Dimension("basis state block is singular".into()))?);
    }
    let input_tail = |mat: &DMatrix<f64>| mat.view((n, n), (m, m)).into_owned();

    let mut sizes = vec![d; horizon];
    if reduce_first {
        sizes[0] = m;
    }
    let mut sdp = ConicSdp::new(sizes);
    let w = model.cost_weight() / horizon as f64;
    for (k, (c, t)) in sdp.cost.iter_mut().zip(basis).enumerate() {
        if k == 0 && reduce_first {
            c.copy_from(&input_tail(&w));
        } else {
            c.copy_from(&congruence_t(t, &w));
        }
    }
    if !reduce_first {
        for i in 0..n {
            for j in 0..=i {
                sdp.add_equality(vec![(sdp.coordinate(0, i, j), 1.0)], 0.0);
            }
        }
    }
    for k in 0..horizon.saturating_sub(1) {
        let (t, li) = (&basis[k], &inverses[k + 1]);
        let whiten = |image: DMatrix<f64>| numerics::symmetrize(&(li * image * li.transpose()));
        let columns = if k == 0 && reduce_first {
            map_columns(m, n, |u| whiten(recursion_map(model, &embed_input_block(u, n))))
        } else {
            map_columns(d, n, |v| whiten(recursion_map(model, &(t * v * t.transpose()))))
        };
        let offset = numerics::symmetrize(&(li * li.transpose()));
        push_recursion(&mut sdp, &columns, &offset, k, k + 1);
    }
    for con in constraints {
        let q = numerics::symmetrize(&con.q);
        for (k, t) in basis.iter().enumerate() {
            let gamma = con.gamma.at(k).expect("schedule length checked by validate");
            let qk = if k == 0 && reduce_first { input_tail(&q) } else { congruence_t(t, &q) };
            sdp.add_inequality(sdp.trace_terms(k, &qk), gamma);
        }
    }
    Ok(sdp)
}

/// `Tᵀ M T`, symmetrized.
fn congruence_t(t: &DMatrix<f64>, m: &DMatrix<f64>) -> DMatrix<f64> {
    numerics::symmetrize(&(t.transpose() * m * t))
}

/// Basis for [`build_finite_horizon_sdp_in_basis`] built from the
/// unconstrained Riccati policy: `T_k = [[L_k, 0], [K_k L_k, I]]` with
/// `L_k L_kᵀ` the state covariance that policy produces (`L_0 = I`).
/// Falls back to the identity wherever the recursion breaks down.
pub fn riccati_basis(model: &SystemModel, horizon: usize) -> Vec<DMatrix<f64>> {
    let n = model.states();
    let m = model.inputs();
    let d = n + m;
    let identity = vec![DMatrix::identity(d, d); horizon];
    let w = model.cost_weight();
    let wxx = w.view((0, 0), (n, n)).into_owned();
    let wux = w.view((n, 0), (m, n)).into_owned();
    let wuu = w.view((n, n), (m, m)).into_owned();
    let (a, b) = (&model.a, &model.b);

    let mut gains = vec![DMatrix::zeros(m, n); horizon];
    let mut p = DMatrix::<f64>::zeros(n, n);
    for k in (0..horizon).rev() {
        let s = numerics::symmetrize(&(&wuu + b.transpose() * &p * b));
        let f = &wux + b.transpose() * &p * a;
        let Ok(si) = pinv(&s, tolerances::RANK) else {
            return identity;
        };
        let gain = -(si * &f);
        let mut next = &wxx + a.transpose() * &p * a + f.transpose() * &gain;
        for ai in &model.multiplicative {
            next += ai.transpose() * &p * ai;
        }
        p = numerics::symmetrize(&next);
        if !p.iter().all(|x| x.is_finite()) {
            return identity;
        }
        gains[k] = gain;
    }

    policy_basis(
        model,
        &AffinePolicy {
            gains,
            noise_covariances: vec![DMatrix::zeros(m, m); horizon],
        },
        horizon,
    )
}

/// Basis for [`build_finite_horizon_sdp_in_basis`] that whitens the
/// trajectory of `policy` from `x_0 = 0`: `T_k = [[L_k, 0], [K_k L_k, I]]`
/// with `L_k L_kᵀ = X_k` (`L_0 = I`). Falls back to the identity wherever
/// the recursion breaks down.
pub fn policy_basis(model: &SystemModel, policy: &AffinePolicy, horizon: usize) -> Vec<DMatrix<f64>> {
    let n = model.states();
    let m = model.inputs();
    let d = n + m;
    let identity = vec![DMatrix::identity(d, d); horizon];
    let (a, b) = (&model.a, &model.b);
    let mut basis = Vec::with_capacity(horizon);
    let mut x = DMatrix::<f64>::zeros(n, n);
    for k in 0..horizon {
        let gain = policy.gain(k);
        let l = match (k, x.clone().cholesky()) {
            (0, _) | (_, None) => DMatrix::identity(n, n),
            (_, Some(c)) => c.l(),
        };
        let mut t = DMatrix::identity(d, d);
        t.view_mut((0, 0), (n, n)).copy_from(&l);
        t.view_mut((n, 0), (m, n)).copy_from(&(gain * &l));
        if !t.iter().all(|v| v.is_finite()) {
            return identity;
        }
        basis.push(t);
        let acl = a + b * gain;
        let mut next = &acl * &x * acl.transpose() + b * policy.noise(k) * b.transpose() + DMatrix::identity(n, n);
        for ai in &model.multiplicative {
            next += ai * &x * ai.transpose();
        }
        x = numerics::symmetrize(&next);
    }
    basis
}

/// Whether some constraint is non-convex in the input, so the optimal
/// policy may need injected noise.
pub fn needs_injected_noise(constraints: &[QuadraticConstraint], states: usize) -> bool {
    constraints.iter().any(|c| !c.convex_in_input(states))
}

/// `K_k = R_kᵀ X_k⁺` and `Π_k = proj_PSD(U_k − R_kᵀ X_k⁺ R_k)`. With
/// `force_zero_noise` every `Π_k` is set to zero, which is optimal when no
/// constraint is non-convex in the input.
pub fn extract_policy(covariances: &[JointCovariance], force_zero_noise: bool) -> Result<AffinePolicy, SynthesisError> {
    let mut gains = Vec::with_capacity(covariances.len());
    let mut noises = Vec::with_capacity(covariances.len());
    for v in covariances {
        let (k, pi) = gain_and_residual(v)?;
        gains.push(k);
        noises.push(if force_zero_noise { DMatrix::zeros(pi.nrows(), pi.ncols()) } else { pi });
    }
    Ok(AffinePolicy {
        gains,
        noise_covariances: noises,
    })
}

/// Gain and projected Schur complement of one block.
pub fn gain_and_residual(v: &JointCovariance) -> Result<(DMatrix<f64>, DMatrix<f64>), SynthesisError> {
    let x = v.x();
    let r = v.r();
    let u = v.u();
    let eig = sym_eig(&x)?;
    let lmax = eig.max().abs();
    let lmin = eig.min();
    if lmax > 0.0 && lmin > 0.0 && lmin < 1e-10 * lmax {
        warn!("near-singular state covariance (condition {:e}); using the pseudoinverse", lmax / lmin);
    }
    let xp = pinv(&x, tolerances::RANK)?;
    let k = r.transpose() * &xp;
    let schur = numerics::symmetrize(&(u - &k * &r));
    Ok((k, project_psd(&schur)?))
}

/// Joint covariance realized by `u = Kx + v`, `E vvᵀ = Π`, from state
/// covariance `X`: `[[X, XKᵀ], [KX, KXKᵀ + Π]]`.
pub fn realized_covariance(x: &DMatrix<f64>, k: &DMatrix<f64>, pi: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let m = k.nrows();
    let mut v = DMatrix::zeros(n + m, n + m);
    let xk = x * k.transpose();
    v.view_mut((0, 0), (n, n)).copy_from(x);
    v.view_mut((0, n), (n, m)).copy_from(&xk);
    v.view_mut((n, 0), (m, n)).copy_from(&xk.transpose());
    v.view_mut((n, n), (m, m)).copy_from(&(k * &xk + pi));
    numerics::symmetrize(&v)
}

#[derive(Debug, Clone)]
pub struct SynthesisResult {
    pub mode: Mode,
    /// One entry for stationary synthesis, `N` for finite horizon.
    pub covariances: Vec<JointCovariance>,
    pub policy: AffinePolicy,
    /// Average cost `(1/N) Σ_k tr([C D] V_k [C D]ᵀ)`, recomputed from the
    /// returned covariances.
    pub objective: f64,
    /// `tr(Q_j V_k) − γ_j(k)`, indexed `[j][k]`.
    pub constraint_activity: Vec<Vec<f64>>,
    pub status: SolveStatus,
    pub check: FeasibilityCheck,
}

impl SynthesisResult {
    pub fn is_optimal(&self) -> bool {
        self.status.state == SolveState::Optimal
    }

    /// Square root of the objective, the root-mean-square output norm.
    pub fn rms_cost(&self) -> f64 {
        self.objective.max(0.0).sqrt()
    }
}

/// Average cost of a covariance sequence.
pub fn average_cost(model: &SystemModel, covariances: &[JointCovariance]) -> f64 {
    let w = model.cost_weight();
    let total: f64 = covariances.iter().map(|v| numerics::trace_product(&w, v.matrix())).sum();
    total / covariances.len().max(1) as f64
}

fn finish(
    model: &SystemModel,
    constraints: &[QuadraticConstraint],
    mode: Mode,
    sdp: &ConicSdp,
    opts: &SolverOptions,
    basis: Option<&[DMatrix<f64>]>,
) -> Result<SynthesisResult, SynthesisError> {
    let sol = solve(sdp, opts)?;
    let n = model.states();
    let blocks: Vec<DMatrix<f64>> = match basis {
        Some(basis) => first_blocks_to_covariances(model, basis, &sol.blocks),
        None => sol.blocks.clone(),
    };
    let covariances: Vec<JointCovariance> = blocks.iter().map(|b| JointCovariance::from_matrix_unchecked(b.clone(), n)).collect();
    // The check always runs in the original coordinates.
    let check = match (basis, mode) {
        (Some(_), Mode::Finite { horizon }) => check_solution(&build_finite_horizon_sdp(model, constraints, horizon)?, &blocks)?,
        _ => check_solution(sdp, &blocks)?,
    };
    let force = !needs_injected_noise(constraints, n);
    let policy = extract_policy(&covariances, force)?;
    let objective = average_cost(model, &covariances);
    let constraint_activity = constraints
        .iter()
        .map(|c| {
            covariances
                .iter()
                .enumerate()
                .map(|(k, v)| numerics::trace_product(&c.q, v.matrix()) - c.gamma.at(k).unwrap_or(f64::NAN))
                .collect()
        })
        .collect();
    debug!(
        "synthesis: {} after {} iterations, objective {objective}",
        sol.status.state.name(),
        sol.status.iterations
    );
    Ok(SynthesisResult {
        mode,
        covariances,
        policy,
        objective,
        constraint_activity,
        status: sol.status,
        check,
    })
}

pub fn synthesize_stationary(
    model: &SystemModel,
    constraints: &[QuadraticConstraint],
    opts: &SolverOptions,
) -> Result<SynthesisResult, SynthesisError> {
    let sdp = build_stationary_sdp(model, constraints)?;
    finish(model, constraints, Mode::Infinite, &sdp, opts, None)
}

pub fn synthesize_finite(
    model: &SystemModel,
    constraints: &[QuadraticConstraint],
    horizon: usize,
    opts: &SolverOptions,
) -> Result<SynthesisResult, SynthesisError> {
    let attempt = |basis: &[DMatrix<f64>]| {
        let sdp = build_finite_horizon_sdp_in_basis(model, constraints, horizon, basis)?;
        finish(model, constraints, Mode::Finite { horizon }, &sdp, opts, Some(basis))
    };
    let first = attempt(&riccati_basis(model, horizon))?;
    if first.is_optimal() {
        return Ok(first);
    }
    // The Riccati basis can be a poor fit when the constraints force a
    // very different policy; the plain coordinates are the fallback.
    let d = model.states() + model.inputs();
    debug!("synthesis: Riccati basis gave {}, retrying in plain coordinates", first.status.state.name());
    let second = attempt(&vec![DMatrix::identity(d, d); horizon])?;
    Ok(if second.is_optimal() { second } else { first })
}

/// Dispatch on the problem's mode.
pub fn synthesize(problem: &Problem, mode: Mode, opts: &SolverOptions) -> Result<SynthesisResult, SynthesisError> {
    match mode {
        Mode::Infinite => synthesize_stationary(&problem.model, &problem.constraints, opts),
        Mode::Finite { horizon } => synthesize_finite(&problem.model, &problem.constraints, horizon, opts),
    }
}

// ---------------------------------------------------------------------------
// Stabilizability and the noise threshold

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Yes,
    No,
    Undecided,
}

impl Verdict {
    pub fn name(self) -> &'static str {
        match self {
            Verdict::Yes => "yes",
            Verdict::No => "no",
            Verdict::Undecided => "undecided",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Stabilizability {
    pub verdict: Verdict,
    /// Minimum-trace solution of the stationary equation, when one was found.
    pub witness: Option<JointCovariance>,
    pub status: SolveStatus,
}

impl Stabilizability {
    pub fn stabilizable(&self) -> bool {
        self.verdict == Verdict::Yes
    }
}

/// Infeasibility scores at or above this are read as "no".
pub const INFEASIBLE_SCORE: f64 = 0.9;

/// Mean-square stabilizability: the model is stabilizable exactly when some
/// `V ⪰ 0` satisfies the stationary recursion. Solved as a minimum-trace
/// problem so a feasible answer comes with a bounded witness.
pub fn check_stabilizability(model: &SystemModel, opts: &SolverOptions) -> Result<Stabilizability, SynthesisError> {
    // The cost weight plays no role here, so only shapes are validated.
    check_valid(model, &[], Some(1))?;
    let d = model.states() + model.inputs();
    let sdp = stationary_sdp(model, &[], DMatrix::identity(d, d))?;
    let sol = solve(&sdp, opts)?;
    let verdict = match sol.status.state {
        SolveState::Optimal => Verdict::Yes,
        SolveState::PrimalInfeasibleSuspected => Verdict::No,
        SolveState::IterationCap | SolveState::NumericalFailure => {
            let score = sol.status.infeasibility_score.unwrap_or(0.0);
            if score >= INFEASIBLE_SCORE {
                Verdict::No
            } else {
                Verdict::Undecided
            }
        }
    };
    let witness = (verdict == Verdict::Yes).then(|| JointCovariance::from_matrix_unchecked(sol.blocks[0].clone(), model.states()));
    Ok(Stabilizability {
        verdict,
        witness,
        status: sol.status,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Probe {
    pub scale: f64,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Threshold {
    /// Midpoint of the final bracket.
    pub critical_scale: f64,
    pub lo: f64,
    pub hi: f64,
    /// Every probe in evaluation order, endpoints first.
    pub probes: Vec<Probe>,
}

#[derive(Debug, Error)]
pub enum ThresholdError {
    #[error("channel {channel} does not exist (model has {channels})")]
    Channel { channel: usize, channels: usize },
    #[error("interval must satisfy 0 <= lo < hi and tol > 0")]
    Interval,
    #[error("no sign change: stabilizable at lo = {lo} is {lo_verdict:?}, at hi = {hi} is {hi_verdict:?}")]
    NoSignChange {
        lo: f64,
        hi: f64,
        lo_verdict: Verdict,
        hi_verdict: Verdict,
    },
    #[error("solver could not decide stabilizability at scale {scale}")]
    Undecided { scale: f64, probes: Vec<Probe> },
    #[error(transparent)]
    Synthesis(#[from] SynthesisError),
}

/// Bisection on `s` for the model with `A_i ↦ s·A_i`: the critical scale
/// beyond which no controller stabilizes the system in mean square.
pub fn noise_threshold(
    model: &SystemModel,
    channel: usize,
    lo: f64,
    hi: f64,
    tol: f64,
    opts: &SolverOptions,
) -> Result<Threshold, ThresholdError> {
    if channel >= model.channels() {
        return Err(ThresholdError::Channel {
            channel,
            channels: model.channels(),
        });
    }
    if !(lo >= 0.0 && hi > lo && tol > 0.0) {
        return Err(ThresholdError::Interval);
    }
    let probe = |s: f64| check_stabilizability(&model.with_channel_scaled(channel, s), opts).map(|r| r.verdict);
    let (lo_v, hi_v) = rayon::join(|| probe(lo), || probe(hi));
    let (lo_v, hi_v) = (lo_v?, hi_v?);
    let mut probes = vec![
        Probe { scale: lo, verdict: lo_v },
        Probe { scale: hi, verdict: hi_v },
    ];
    if lo_v != Verdict::Yes || hi_v != Verdict::No {
        return Err(ThresholdError::NoSignChange {
            lo,
            hi,
            lo_verdict: lo_v,
            hi_verdict: hi_v,
        });
    }
    let (mut a, mut b) = (lo, hi);
    while b - a > tol {
        let mid = 0.5 * (a + b);
        let v = probe(mid)?;
        probes.push(Probe { scale: mid, verdict: v });
        match v {
            Verdict::Yes => a = mid,
            Verdict::No => b = mid,
            Verdict::Undecided => return Err(ThresholdError::Undecided { scale: mid, probes }),
        }
    }
    Ok(Threshold {
        critical_scale: 0.5 * (a + b),
        lo: a,
        hi: b,
        probes,
    })
}

// ---------------------------------------------------------------------------
// Closed-loop second moments

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClosedLoopError {
    #[error("closed loop is not mean-square stable (second-moment radius {radius})")]
    Unstable { radius: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

fn closed_loop_operator(model: &SystemModel, gain: &DMatrix<f64>) -> DMatrix<f64> {
    let acl = &model.a + &model.b * gain;
    let mut op = acl.kronecker(&acl);
    for ai in &model.multiplicative {
        op += ai.kronecker(ai);
    }
    op
}

/// Spectral radius of `X ↦ A_cl X A_clᵀ + Σ A_i X A_iᵀ`. Below one means the
/// closed loop is mean-square stable.
pub fn mean_square_radius(model: &SystemModel, gain: &DMatrix<f64>) -> f64 {
    let op = closed_loop_operator(model, gain);
    op.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Stationary state covariance of `u = Kx + v`, `E vvᵀ = Π`:
/// the solution of `X = A_cl X A_clᵀ + Σ A_i X A_iᵀ + B Π Bᵀ + I`.
pub fn closed_loop_covariance(model: &SystemModel, gain: &DMatrix<f64>, noise: &DMatrix<f64>) -> Result<DMatrix<f64>, ClosedLoopError> {
    let n = model.states();
    let m = model.inputs();
    if gain.shape() != (m, n) || noise.shape() != (m, m) {
        return Err(ClosedLoopError::Dimension(format!(
            "gain {:?} and noise {:?} for n = {n}, m = {m}",
            gain.shape(),
            noise.shape()
        )));
    }
    let radius = mean_square_radius(model, gain);
    if radius >= 1.0 {
        return Err(ClosedLoopError::Unstable { radius });
    }
    let op = closed_loop_operator(model, gain);
    let lhs = DMatrix::identity(n * n, n * n) - op;
    let rhs = &model.b * noise * model.b.transpose() + DMatrix::identity(n, n);
    let vec_rhs = nalgebra::DVector::from_column_slice(rhs.as_slice());
    let sol = lhs.lu().solve(&vec_rhs).ok_or(ClosedLoopError::Unstable { radius })?;
    Ok(numerics::symmetrize(&DMatrix::from_column_slice(n, n, sol.as_slice())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::example;
    use crate::model::JointCovariance;

    fn jc(v: DMatrix<f64>, n: usize) -> JointCovariance {
        JointCovariance::new(v, n).unwrap()
    }

    #[test]
    fn propagate_scalar_substitution() {
        let model = SystemModel::scalar(1.0, 1.0, &[0.5]);
        let x = propagate_covariance(&model, &jc(DMatrix::identity(2, 2), 1)).unwrap();
        assert!((x[(0, 0)] - 3.25).abs() < 1e-14);
    }

    #[test]
    fn propagate_zero_gives_identity() {
        let model = SystemModel::scalar(0.7, 1.0, &[]);
        let x = propagate_covariance(&model, &jc(DMatrix::zeros(2, 2), 1)).unwrap();
        assert_eq!(x, DMatrix::identity(1, 1));
    }

    #[test]
    fn printed_optimum_is_nearly_stationary() {
        // Hand substitution of the printed (one-decimal) V*:
        // [A B]V[A B]ᵀ + 0.5·X + I = [[58.5, 130.8], [130.8, 309.55]].
        let p = example::problem();
        let v = jc(example::printed_covariance(), 2);
        let next = propagate_covariance(&p.model, &v).unwrap();
        let oracle = DMatrix::from_row_slice(2, 2, &[58.5, 130.8, 130.8, 309.55]);
        assert!((&next - &oracle).amax() < 1e-9, "{next}");
        // Rounding to one decimal moves the fixed point by up to 0.51% on the
        // smallest entry, so the band is slightly wider than half a percent.
        let x = v.x();
        for i in 0..2 {
            for j in 0..2 {
                let rel = (next[(i, j)] - x[(i, j)]).abs() / x[(i, j)].abs();
                assert!(rel < 5.2e-3, "({i},{j}): {} vs {}", next[(i, j)], x[(i, j)]);
            }
        }
    }

    #[test]
    fn propagate_rejects_wrong_shape() {
        let model = SystemModel::scalar(0.7, 1.0, &[]);
        assert!(propagate_covariance(&model, &jc(DMatrix::identity(3, 3), 2)).is_err());
    }

    #[test]
    fn extract_singular_initial_block() {
        let v = jc(DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 0.7]), 1);
        let policy = extract_policy(&[v], false).unwrap();
        assert_eq!(policy.gains[0][(0, 0)], 0.0);
        assert!((policy.noise_covariances[0][(0, 0)] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn extract_decoupled_blocks() {
        let v = jc(DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![2.0, 3.0])), 1);
        let policy = extract_policy(&[v], false).unwrap();
        assert_eq!(policy.gains[0][(0, 0)], 0.0);
        assert!((policy.noise_covariances[0][(0, 0)] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn extract_from_printed_optimum() {
        // Oracle: (R*)ᵀ(X*)⁻¹ with the closed-form 2x2 inverse of the printed,
        // rounded X* = [[58.8, 131.2], [131.2, 309.5]]; det = 58.8·309.5 − 131.2².
        let det: f64 = 58.8 * 309.5 - 131.2 * 131.2;
        let k1: f64 = (-283.7 * 309.5 + 674.8 * 131.2) / det;
        let k2: f64 = (283.7 * 131.2 - 674.8 * 58.8) / det;
        assert!((k1 - 0.74).abs() < 0.01 && (k2 + 2.49).abs() < 0.01);
        let v = jc(example::printed_covariance(), 2);
        let (k, pi) = gain_and_residual(&v).unwrap();
        assert!((k[(0, 0)] - k1).abs() < 1e-9);
        assert!((k[(0, 1)] - k2).abs() < 1e-9);
        assert!(pi[(0, 0)].abs() <= 0.5);
    }

    #[test]
    fn finite_horizon_layout() {
        let model = SystemModel::scalar(0.0, 1.0, &[]);
        let sdp = build_finite_horizon_sdp(&model, &[], 3).unwrap();
        assert_eq!(sdp.blocks, vec![2, 2, 2]);
        // X_0 = 0 plus two recursion rows.
        assert_eq!(sdp.equalities.len(), 3);
        let con = QuadraticConstraint::new(DMatrix::identity(2, 2), 5.0);
        let sdp = build_finite_horizon_sdp(&model, &[con], 3).unwrap();
        assert_eq!(sdp.inequalities.len(), 3);
    }

    #[test]
    fn single_step_horizon_costs_nothing() {
        let model = SystemModel::scalar(0.0, 1.0, &[]);
        let r = synthesize_finite(&model, &[], 1, &SolverOptions::default()).unwrap();
        assert!(r.is_optimal());
        assert!(r.objective.abs() < 1e-6);
        let v = r.covariances[0].matrix();
        assert!(v[(0, 0)].abs() < 1e-6 && v[(1, 1)].abs() < 1e-6);
    }

    #[test]
    fn two_step_horizon_enumerated() {
        let model = SystemModel::scalar(0.0, 1.0, &[]);
        let r = synthesize_finite(&model, &[], 2, &SolverOptions::default()).unwrap();
        assert!(r.is_optimal());
        assert!((r.objective - 0.5).abs() < 1e-5, "{}", r.objective);
    }

    #[test]
    fn scalar_lq_stationary() {
        let model = SystemModel::scalar(0.0, 1.0, &[]);
        let r = synthesize_stationary(&model, &[], &SolverOptions::default()).unwrap();
        assert!(r.is_optimal());
        let v = r.covariances[0].matrix();
        assert!((v[(0, 0)] - 1.0).abs() < 1e-5);
        assert!(v[(1, 1)].abs() < 1e-5);
        assert!((r.objective - 1.0).abs() < 1e-5);
    }

    #[test]
    fn stationary_requires_scalar_gamma() {
        let model = SystemModel::scalar(0.5, 1.0, &[]);
        let con = QuadraticConstraint {
            q: DMatrix::identity(2, 2),
            gamma: Gamma::Schedule(vec![1.0]),
        };
        assert!(build_stationary_sdp(&model, &[con]).is_err());
    }

    #[test]
    fn stabilizability_examples() {
        let opts = SolverOptions::default();
        let yes = check_stabilizability(&SystemModel::scalar(0.0, 0.0, &[0.5f64.sqrt()]), &opts).unwrap();
        assert_eq!(yes.verdict, Verdict::Yes);
        let x = yes.witness.unwrap().x()[(0, 0)];
        assert!((x - 2.0).abs() < 1e-4, "{x}");
        let no = check_stabilizability(&SystemModel::scalar(0.0, 0.0, &[1.1]), &opts).unwrap();
        assert_eq!(no.verdict, Verdict::No);
        let yes = check_stabilizability(&SystemModel::scalar(2.0, 1.0, &[0.5]), &opts).unwrap();
        assert_eq!(yes.verdict, Verdict::Yes);
    }

    #[test]
    fn threshold_precondition() {
        let model = SystemModel::scalar(0.5, 0.0, &[1.0]);
        let err = noise_threshold(&model, 0, 1.0, 1.5, 1e-3, &SolverOptions::default()).unwrap_err();
        assert!(matches!(err, ThresholdError::NoSignChange { .. }));
        assert!(matches!(
            noise_threshold(&model, 1, 0.1, 1.5, 1e-3, &SolverOptions::default()),
            Err(ThresholdError::Channel { .. })
        ));
    }

    #[test]
    fn closed_loop_scalar() {
        // x' = (0.5 + k)x + σ·0.5 x + w with k = -0.5: X = 0.25 X + 1.
        let model = SystemModel::scalar(0.5, 1.0, &[0.5]);
        let k = DMatrix::from_element(1, 1, -0.5);
        let x = closed_loop_covariance(&model, &k, &DMatrix::zeros(1, 1)).unwrap();
        assert!((x[(0, 0)] - 4.0 / 3.0).abs() < 1e-12);
        let x = closed_loop_covariance(&model, &k, &DMatrix::from_element(1, 1, 0.75)).unwrap();
        assert!((x[(0, 0)] - 1.75 / 0.75).abs() < 1e-12);
        assert!(closed_loop_covariance(&model, &DMatrix::zeros(1, 1), &DMatrix::zeros(1, 1)).is_ok());
        let unstable = SystemModel::scalar(2.0, 1.0, &[]);
        assert!(closed_loop_covariance(&unstable, &DMatrix::zeros(1, 1), &DMatrix::zeros(1, 1)).is_err());
    }

    /// Forward covariances of the policy `u = K_k x` from `x_0 = 0`.
    fn trajectory(model: &SystemModel, gains: &[DMatrix<f64>]) -> Vec<DMatrix<f64>> {
        let n = model.states();
        let mut x = DMatrix::zeros(n, n);
        let mut out = Vec::new();
        for k in gains {
            out.push(realized_covariance(&x, k, &DMatrix::zeros(k.nrows(), k.nrows())));
            let acl = &model.a + &model.b * k;
            let mut next = &acl * &x * acl.transpose() + DMatrix::identity(n, n);
            for ai in &model.multiplicative {
                next += ai * &x * ai.transpose();
            }
            x = next;
        }
        out
    }

    #[test]
    fn riccati_trajectory_in_both_coordinates() {
        // Oracle: backward Riccati recursion for the unconstrained §IV model
        // with N = 20, average cost 385.98886794 (computed independently).
        let p = example::unconstrained_problem();
        let n = 20;
        let basis = riccati_basis(&p.model, n);
        let gains: Vec<DMatrix<f64>> = basis
            .iter()
            .map(|t| {
                let l = t.view((0, 0), (2, 2)).into_owned();
                t.view((2, 0), (1, 2)) * l.try_inverse().unwrap()
            })
            .collect();
        let blocks = trajectory(&p.model, &gains);
        let literal = build_finite_horizon_sdp(&p.model, &[], n).unwrap();
        let c = check_solution(&literal, &blocks).unwrap();
        assert!(c.equality_residual < 1e-9, "{c:?}");
        assert!((c.objective - 385.98886794).abs() < 1e-6, "{}", c.objective);

        let mut tilde: Vec<DMatrix<f64>> = blocks
            .iter()
            .zip(&basis)
            .map(|(v, t)| {
                let ti = t.clone().try_inverse().unwrap();
                numerics::symmetrize(&(&ti * v * ti.transpose()))
            })
            .collect();
        tilde[0] = blocks[0].view((2, 2), (1, 1)).into_owned();
        let transformed = build_finite_horizon_sdp_in_basis(&p.model, &[], n, &basis).unwrap();
        let c = check_solution(&transformed, &tilde).unwrap();
        assert!(c.equality_residual < 1e-9, "{c:?}");
        assert!((c.objective - 385.98886794).abs() < 1e-6);
        let back = first_blocks_to_covariances(&p.model, &basis, &tilde);
        for (a, b) in back.iter().zip(&blocks) {
            assert!((a - b).amax() < 1e-9 * (1.0 + b.amax()));
        }
    }

    #[test]
    fn identity_basis_is_the_literal_program() {
        let p = example::problem();
        let basis = vec![DMatrix::identity(3, 3); 4];
        let a = finite_sdp(&p.model, &p.constraints, 4, &basis, false).unwrap();
        let b = build_finite_horizon_sdp(&p.model, &p.constraints, 4).unwrap();
        assert_eq!(a, b);
        let reduced = build_finite_horizon_sdp_in_basis(&p.model, &p.constraints, 4, &basis).unwrap();
        assert_eq!(reduced.blocks[0], 1);
        assert_eq!(reduced.equalities.len(), b.equalities.len() - 3);
    }

    #[test]
    fn basis_must_keep_the_state_block() {
        let p = example::problem();
        let mut t = DMatrix::identity(3, 3);
        t[(0, 2)] = 1.0;
        assert!(build_finite_horizon_sdp_in_basis(&p.model, &p.constraints, 1, &[t]).is_err());
    }

    #[test]
    fn finite_horizon_matches_riccati() {
        let p = example::unconstrained_problem();
        let r = synthesize_finite(&p.model, &[], 20, &SolverOptions::default()).unwrap();
        assert!(r.is_optimal(), "{:?}", r.status);
        assert!((r.objective - 385.98886794).abs() < 1e-4 * 385.99, "{}", r.objective);
        assert!(r.check.passes(1e-6, 1e-6), "{:?}", r.check);
    }
}
