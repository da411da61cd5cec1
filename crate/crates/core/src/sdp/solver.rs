//! Operator splitting on the homogeneous self-dual embedding.
//!
//! With `A = [A_eq; G; -I]`, `b = [b_eq; h; 0]` and cone
//! `K = {0} × R₊ × PSD blocks`, the primal is `min cᵀx` s.t. `Ax + s = b`,
//! `s ∈ K`. The iteration is Douglas–Rachford in a weighted metric
//! `diag(ρ_x I, Σ, 1)`: one solve with the cached factor of
//! `I + Âᵀ(ρ_x Σ)⁻¹Â`, one projection per PSD block, over-relaxation and
//! a type-II Anderson step. `ρ` scales `Σ`, and equality rows carry a much
//! lighter weight than cone rows. The embedding variable `τ` tends to zero
//! on infeasible problems, which is where the infeasibility certificate
//! comes from.

use log::{debug, trace, warn};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::anderson::Anderson;
use super::banded::BandedCholesky;
use super::infeasibility::{detect_infeasibility, IterateRecord};
use super::presolve::{presolve, PresolveError, Presolved};
use super::problem::ConicSdp;
use crate::numerics::{sym_eig, SymVec};

#[derive(Debug, Clone, PartialEq)]
pub struct SolverOptions {
    pub eps_abs: f64,
    pub eps_rel: f64,
    /// Farkas certificate threshold `‖Aᵀy‖∞ / (-bᵀy)`.
    pub eps_infeasible: f64,
    pub max_iters: usize,
    /// Initial metric weight on the dual rows (the penalty parameter).
    pub rho: f64,
    /// Metric weight on the primal variable.
    pub rho_x: f64,
    pub adaptive_rho: bool,
    /// Over-relaxation.
    pub alpha: f64,
    /// Residuals are evaluated every this many iterations.
    pub check_interval: usize,
    /// Anderson acceleration history length; zero disables it.
    pub anderson_memory: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            eps_abs: 1e-7,
            eps_rel: 1e-7,
            eps_infeasible: 1e-7,
            max_iters: 200_000,
            rho: 1.0,
            rho_x: 1e-6,
            adaptive_rho: true,
            alpha: 1.6,
            check_interval: 25,
            anderson_memory: 10,
        }
    }
}

impl SolverOptions {
    /// Stopping tolerances set to `eps`. The certificate threshold keeps its
    /// default: a loose one accepts spurious certificates early on.
    pub fn with_eps(eps: f64) -> Self {
        Self {
            eps_abs: eps,
            eps_rel: eps,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveState {
    Optimal,
    PrimalInfeasibleSuspected,
    IterationCap,
    NumericalFailure,
}

impl SolveState {
    pub fn name(self) -> &'static str {
        match self {
            SolveState::Optimal => "optimal",
            SolveState::PrimalInfeasibleSuspected => "primal_infeasible_suspected",
            SolveState::IterationCap => "iteration_cap",
            SolveState::NumericalFailure => "numerical_failure",
        }
    }
}

/// Outcome of a solve. Residuals are relative: the absolute residual divided
/// by `eps_abs/eps_rel + scale`, so `state == Optimal` means each is at most
/// `eps_rel`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveStatus {
    pub state: SolveState,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub gap: f64,
    pub objective: f64,
    pub dual_objective: f64,
    pub iterations: usize,
    /// Certificate-strength score, filled in whenever the solve did not
    /// reach optimality.
    pub infeasibility_score: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SdpSolution {
    /// One matrix per block, taken from the cone slack so it is PSD by
    /// construction. Only meaningful when the solve is optimal or capped.
    pub blocks: Vec<DMatrix<f64>>,
    pub equality_duals: Vec<f64>,
    pub inequality_duals: Vec<f64>,
    pub status: SolveStatus,
    pub history: Vec<IterateRecord>,
    pub dropped_equalities: Vec<usize>,
}

pub fn solve(problem: &ConicSdp, opts: &SolverOptions) -> Result<SdpSolution, PresolveError> {
    let pre = presolve(problem)?;
    Ok(solve_presolved(&pre, opts))
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |a, x| a.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Workspace<'a> {
    pre: &'a Presolved,
    at_scaled: super::sparse::Csr,
    at: super::sparse::Csr,
    chol: BandedCholesky,
    /// Metric weight on `x`.
    rho_x: f64,
    /// Metric weight on each row of `y`.
    sigma: Vec<f64>,
    nv: usize,
    m: usize,
    me: usize,
    mi: usize,
    offsets: Vec<usize>,
    tmp: Vec<f64>,
}

impl Workspace<'_> {
    /// Solves `[[ρ_x I, Âᵀ], [−Â, Σ]] [x; y] = [r1; r2]` through the cached
    /// factor of `I + Âᵀ(ρ_x Σ)⁻¹Â`.
    fn solve_m(&mut self, r1: &[f64], r2: &[f64], x: &mut [f64], y: &mut [f64]) {
        for i in 0..self.m {
            y[i] = r2[i] / self.sigma[i];
        }
        self.at_scaled.mul(y, &mut self.tmp);
        for i in 0..self.nv {
            x[i] = (r1[i] - self.tmp[i]) / self.rho_x;
        }
        self.chol.solve_in_place(x);
        self.pre.scaled.mul(x, y);
        for i in 0..self.m {
            y[i] = (y[i] + r2[i]) / self.sigma[i];
        }
    }

    fn project_cone(&self, z: &mut [f64]) {
        let (nv, me, mi) = (self.nv, self.me, self.mi);
        let y = &mut z[nv..nv + self.m];
        for v in &mut y[me..me + mi] {
            *v = v.max(0.0);
        }
        for (b, &d) in self.pre.problem.blocks.iter().enumerate() {
            let seg = &mut y[me + mi + self.offsets[b]..me + mi + self.offsets[b + 1]];
            project_psd_svec(seg, d);
        }
        let last = z.len() - 1;
        z[last] = z[last].max(0.0);
    }
}

fn project_psd_svec(seg: &mut [f64], d: usize) {
    if d == 1 {
        seg[0] = seg[0].max(0.0);
        return;
    }
    let sv = SymVec::new(d);
    let m = sv.smat(seg);
    match sym_eig(&m) {
        Ok(eig) => {
            if eig.min() >= 0.0 {
                return;
            }
            if eig.max() <= 0.0 {
                seg.iter_mut().for_each(|v| *v = 0.0);
                return;
            }
            sv.svec_into(&eig.recompose(|l| l.max(0.0)), seg);
        }
        Err(_) => seg.iter_mut().for_each(|v| *v = f64::NAN),
    }
}

fn factor_normal_matrix(pre: &Presolved, rho_x: f64, sigma: &[f64]) -> Option<BandedCholesky> {
    let a = &pre.scaled;
    let mut bw = 0;
    for i in 0..a.nrows {
        let mut lo = usize::MAX;
        let mut hi = 0;
        for (j, _) in a.row(i) {
            lo = lo.min(j);
            hi = hi.max(j);
        }
        if lo <= hi {
            bw = bw.max(hi - lo);
        }
    }
    let mut band = BandedCholesky::zeros(a.ncols, bw);
    for j in 0..a.ncols {
        band.add(j, j, 1.0);
    }
    for i in 0..a.nrows {
        let r = a.indptr[i]..a.indptr[i + 1];
        let idx = &a.indices[r.clone()];
        let val = &a.values[r];
        let weight = 1.0 / (rho_x * sigma[i]);
        for p in 0..idx.len() {
            for q in 0..=p {
                band.add(idx[p], idx[q], weight * val[p] * val[q]);
            }
        }
    }
    debug!("sdp: normal matrix order {} bandwidth {}", a.ncols, band.bandwidth());
    band.factor().ok()
}

struct Unscaled {
    x: Vec<f64>,
    y: Vec<f64>,
    s: Vec<f64>,
}

const RHO_RATIO: f64 = 10.0;
const RHO_FACTOR: f64 = 2.0;
const RHO_MIN_GAP: usize = 50;
const RHO_RANGE: (f64, f64) = (1e-6, 1e6);
const ANDERSON_INTERVAL: usize = 1;
/// Equality rows get a much lighter dual metric, which enforces them harder.
const EQUALITY_WEIGHT: f64 = 1e-3;

pub fn solve_presolved(pre: &Presolved, opts: &SolverOptions) -> SdpSolution {
    let nv = pre.problem.num_coordinates();
    let m = pre.stacked.nrows;
    let me = pre.problem.equalities.len();
    let mi = pre.problem.inequalities.len();
    let len = nv + m + 1;

    let failure = |iterations: usize| SdpSolution {
        blocks: pre.problem.blocks.iter().map(|&d| DMatrix::zeros(d, d)).collect(),
        equality_duals: vec![0.0; me],
        inequality_duals: vec![0.0; mi],
        status: SolveStatus {
            state: SolveState::NumericalFailure,
            primal_residual: f64::NAN,
            dual_residual: f64::NAN,
            gap: f64::NAN,
            objective: f64::NAN,
            dual_objective: f64::NAN,
            iterations,
            infeasibility_score: None,
        },
        history: Vec::new(),
        dropped_equalities: pre.dropped_equalities.clone(),
    };

    let rho_x = opts.rho_x;
    let sigma_of = |rho: f64| -> Vec<f64> { (0..m).map(|i| if i < me { rho * EQUALITY_WEIGHT } else { rho }).collect() };
    let mut rho = opts.rho;
    let sigma = sigma_of(rho);
    let Some(chol) = factor_normal_matrix(pre, rho_x, &sigma) else {
        warn!("sdp: normal matrix factorization failed");
        return failure(0);
    };
    let mut ws = Workspace {
        pre,
        at_scaled: pre.scaled.transpose(),
        at: pre.stacked.transpose(),
        chol,
        rho_x,
        sigma,
        nv,
        m,
        me,
        mi,
        offsets: pre.problem.offsets(),
        tmp: vec![0.0; nv],
    };

    let d = &pre.scaling.columns;
    let e = &pre.row_scale;
    let sc = pre.scaling.dual;
    let sb = pre.scaling.primal;
    let c_hat: Vec<f64> = pre.cost.iter().zip(d).map(|(c, d)| c * d * sc).collect();
    let b_unit: Vec<f64> = pre.rhs.iter().zip(e).map(|(b, e)| b * e).collect();
    let b_hat: Vec<f64> = b_unit.iter().map(|b| b * sb).collect();

    let mut g = vec![0.0; nv + m];
    let mut hg = 0.0;
    let refresh_g = |ws: &mut Workspace, b_hat: &[f64], g: &mut [f64], hg: &mut f64| {
        let (gx, gy) = g.split_at_mut(nv);
        ws.solve_m(&c_hat, b_hat, gx, gy);
        *hg = dot(&c_hat, gx) + dot(b_hat, gy);
    };
    refresh_g(&mut ws, &b_hat, &mut g, &mut hg);

    // Douglas–Rachford on w: ũ = (I + Q)⁻¹ w, u = Π(2ũ − w),
    // w ← w + α(u − ũ). At a fixed point u solves the embedding and
    // u − (2ũ − w) carries the cone slack s and κ.
    let mut w = vec![0.0; len];
    w[len - 1] = 1.0;
    let mut ut = vec![0.0; len];
    let mut u = vec![0.0; len];
    let mut slack = vec![0.0; len];
    let mut t = vec![0.0; len];
    let mut rhs = vec![0.0; nv + m];
    let mut plain = vec![0.0; len];

    let alpha = opts.alpha;
    let mut anderson = (opts.anderson_memory > 0).then(|| Anderson::new(opts.anderson_memory, len));
    let mut accelerated = false;
    let mut prev_residual = f64::INFINITY;

    let mut history = Vec::new();
    let mut last_adapt = 0usize;
    let mut adapt_gap = RHO_MIN_GAP;
    let mut ax = vec![0.0; m];
    let mut aty = vec![0.0; nv];

    let unscale = |u: &[f64], slack: &[f64], sb: f64, tau: f64| -> Unscaled {
        let x = (0..nv).map(|i| d[i] * u[i] / (sb * tau)).collect();
        let y = (0..m).map(|i| e[i] * u[nv + i] / (sc * tau)).collect();
        let s = (0..m).map(|i| slack[nv + i] / (e[i] * sb * tau)).collect();
        Unscaled { x, y, s }
    };

    let mut state = SolveState::IterationCap;
    let mut iterations = opts.max_iters;
    let mut last = (f64::NAN, f64::NAN, f64::NAN, f64::NAN, f64::NAN);

    let mut k = 0;
    while k < opts.max_iters {
        {
            for i in 0..nv {
                rhs[i] = rho_x * w[i];
            }
            for i in 0..m {
                rhs[nv + i] = ws.sigma[i] * w[nv + i];
            }
            let (px, py) = ut.split_at_mut(nv);
            ws.solve_m(&rhs[..nv], &rhs[nv..], px, &mut py[..m]);
        }
        let hp = dot(&c_hat, &ut[..nv]) + dot(&b_hat, &ut[nv..nv + m]);
        let tau = (w[len - 1] + hp) / (1.0 + hg);
        for i in 0..nv + m {
            ut[i] -= tau * g[i];
        }
        ut[len - 1] = tau;
        for i in 0..len {
            u[i] = 2.0 * ut[i] - w[i];
        }
        slack.copy_from_slice(&u);
        ws.project_cone(&mut u);
        let mut fixed_residual = 0.0;
        for i in 0..len {
            slack[i] = u[i] - slack[i];
            if (nv..nv + m).contains(&i) {
                slack[i] *= ws.sigma[i - nv];
            }
            t[i] = w[i] + alpha * (u[i] - ut[i]);
            fixed_residual += (t[i] - w[i]) * (t[i] - w[i]);
        }
        k += 1;

        if let Some(aa) = anderson.as_mut() {
            if accelerated && fixed_residual > prev_residual {
                // The extrapolated point made things worse: fall back to the
                // plain iterate that preceded it and start the history over.
                w.copy_from_slice(&plain);
                aa.reset();
                accelerated = false;
                prev_residual = f64::INFINITY;
                continue;
            }
            prev_residual = fixed_residual;
            plain.copy_from_slice(&t);
            if k % ANDERSON_INTERVAL == 0 {
                aa.extrapolate(&w, &mut t);
                accelerated = true;
            } else {
                accelerated = false;
            }
        }
        std::mem::swap(&mut w, &mut t);

        let done = k == opts.max_iters;
        if k % opts.check_interval.max(1) != 0 && !done {
            continue;
        }
        if w.iter().chain(&u).any(|x| !x.is_finite()) {
            warn!("sdp: non-finite iterate at iteration {k}");
            return failure(k);
        }

        // Farkas certificate from the unnormalized dual direction.
        let y_raw: Vec<f64> = (0..m).map(|i| e[i] * u[nv + i]).collect();
        let bty = dot(&pre.rhs, &y_raw);
        let certificate = if bty < 0.0 {
            ws.at.mul(&y_raw, &mut aty);
            Some(inf_norm(&aty) / -bty)
        } else {
            None
        };

        let tau_now = u[len - 1];
        let scale_u = inf_norm(&u[..nv + m]).max(1e-300);
        let mut record = IterateRecord {
            iteration: k,
            primal_residual: f64::INFINITY,
            dual_residual: f64::INFINITY,
            tau: tau_now,
            iterate_norm: f64::INFINITY,
            certificate,
        };
        // Residuals of the homogeneous iterate, relative to scales that
        // carry the same factor of `τ`.
        let sol = unscale(&u, &slack, sb, 1.0);
        ws.pre.stacked.mul(&sol.x, &mut ax);
        let mut rp = 0.0f64;
        for i in 0..m {
            rp = rp.max((ax[i] + sol.s[i] - tau_now * pre.rhs[i]).abs());
        }
        let p_scale = inf_norm(&ax).max(inf_norm(&sol.s)).max(tau_now * inf_norm(&pre.rhs));
        ws.at.mul(&sol.y, &mut aty);
        let mut rd = 0.0f64;
        for i in 0..nv {
            rd = rd.max((aty[i] + tau_now * pre.cost[i]).abs());
        }
        let d_scale = inf_norm(&aty).max(tau_now * inf_norm(&pre.cost));
        let ratio = opts.eps_abs / opts.eps_rel.max(1e-300);
        let rp_rel = rp / (ratio * tau_now + p_scale);
        let rd_rel = rd / (ratio * tau_now + d_scale);
        if tau_now > 1e-12 * scale_u {
            let pobj = dot(&pre.cost, &sol.x) / tau_now;
            let dobj = -dot(&pre.rhs, &sol.y) / tau_now;
            let gap = (pobj - dobj).abs();
            let g_scale = pobj.abs().max(dobj.abs());
            let gap_rel = gap / (ratio + g_scale);
            record.primal_residual = rp_rel;
            record.dual_residual = rd_rel;
            record.iterate_norm = inf_norm(&sol.x) / tau_now;
            last = (rp_rel, rd_rel, gap_rel, pobj, dobj);

            if rp_rel <= opts.eps_rel && rd_rel <= opts.eps_rel && gap_rel <= opts.eps_rel {
                history.push(record);
                state = SolveState::Optimal;
                iterations = k;
                break;
            }

            if opts.adaptive_rho && k - last_adapt >= adapt_gap {
                let balance = rp_rel / rd_rel.max(1e-300);
                let f = if balance > RHO_RATIO {
                    1.0 / RHO_FACTOR
                } else if balance < 1.0 / RHO_RATIO {
                    RHO_FACTOR
                } else {
                    1.0
                };
                let next = rho * f;
                if f != 1.0 && (RHO_RANGE.0..=RHO_RANGE.1).contains(&next) {
                    let sigma = sigma_of(next);
                    if let Some(chol) = factor_normal_matrix(pre, rho_x, &sigma) {
                        rho = next;
                        ws.chol = chol;
                        ws.sigma = sigma;
                        // Restart from the current point, keeping the slack
                        // it implies under the new metric.
                        w[..nv].copy_from_slice(&u[..nv]);
                        for i in 0..m {
                            w[nv + i] = u[nv + i] + slack[nv + i] / ws.sigma[i];
                        }
                        w[len - 1] = u[len - 1] + slack[len - 1];
                        refresh_g(&mut ws, &b_hat, &mut g, &mut hg);
                        if let Some(aa) = anderson.as_mut() {
                            aa.reset();
                        }
                        accelerated = false;
                        prev_residual = f64::INFINITY;
                        last_adapt = k;
                        // Each change perturbs the iteration, so back off.
                        adapt_gap *= 2;
                        trace!("sdp: rho {rho} at iteration {k}");
                    }
                }
            }
        }
        history.push(record);
        if let Some(cert) = certificate {
            if cert <= opts.eps_infeasible {
                state = SolveState::PrimalInfeasibleSuspected;
                iterations = k;
                break;
            }
        }
    }

    let tau = u[len - 1];
    let sol = if tau > 0.0 {
        unscale(&u, &slack, sb, tau)
    } else {
        Unscaled {
            x: vec![0.0; nv],
            y: vec![0.0; m],
            s: vec![0.0; m],
        }
    };
    let cone = &sol.s[me + mi..];
    let blocks = pre.problem.vector_to_blocks(cone);
    let objective = dot(&pre.cost, cone);
    let infeasibility_score = match state {
        SolveState::Optimal => None,
        _ => Some(detect_infeasibility(&history, opts.eps_rel)),
    };
    if state == SolveState::PrimalInfeasibleSuspected {
        debug!("sdp: infeasibility certificate after {iterations} iterations");
    }
    SdpSolution {
        blocks,
        equality_duals: sol.y[..me].to_vec(),
        inequality_duals: sol.y[me..me + mi].to_vec(),
        status: SolveStatus {
            state,
            primal_residual: last.0,
            dual_residual: last.1,
            gap: last.2,
            objective,
            dual_objective: last.4,
            iterations,
            infeasibility_score,
        },
        history,
        dropped_equalities: pre.dropped_equalities.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// a = 0, b = 1 scalar system: X = U + 1, minimize X + U.
    fn scalar_lq() -> ConicSdp {
        let mut p = ConicSdp::new(vec![2]);
        p.cost[0] = DMatrix::identity(2, 2);
        p.add_equality(vec![(0, 1.0), (2, -1.0)], 1.0);
        p
    }

    #[test]
    fn scalar_lq_optimum() {
        let sol = solve(&scalar_lq(), &SolverOptions::default()).unwrap();
        assert_eq!(sol.status.state, SolveState::Optimal);
        let v = &sol.blocks[0];
        assert!((v[(0, 0)] - 1.0).abs() < 1e-5, "{v}");
        assert!(v[(1, 1)].abs() < 1e-5);
        assert!(v[(0, 1)].abs() < 1e-5);
        assert!((sol.status.objective - 1.0).abs() < 1e-5);
    }

    #[test]
    fn infeasible_scalar_certified() {
        // X - 1.21 X = 1 over X ⪰ 0.
        let mut p = ConicSdp::new(vec![1]);
        p.cost[0] = DMatrix::identity(1, 1);
        p.add_equality(vec![(0, 1.0 - 1.21)], 1.0);
        let sol = solve(&p, &SolverOptions::default()).unwrap();
        assert_eq!(sol.status.state, SolveState::PrimalInfeasibleSuspected);
        assert!(sol.status.infeasibility_score.unwrap() >= 0.9);
    }

    #[test]
    fn inequality_is_respected() {
        // minimize -x subject to x <= 2 over 1x1 PSD plus x = x (no equality).
        let mut p = ConicSdp::new(vec![1]);
        p.cost[0] = DMatrix::from_element(1, 1, -1.0);
        p.add_inequality(vec![(0, 1.0)], 2.0);
        let sol = solve(&p, &SolverOptions::default()).unwrap();
        assert_eq!(sol.status.state, SolveState::Optimal);
        assert!((sol.blocks[0][(0, 0)] - 2.0).abs() < 1e-5);
        assert!((sol.inequality_duals[0] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn deterministic_iterates() {
        let a = solve(&scalar_lq(), &SolverOptions::default()).unwrap();
        let b = solve(&scalar_lq(), &SolverOptions::default()).unwrap();
        assert_eq!(a.status, b.status);
        assert_eq!(a.blocks, b.blocks);
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn iteration_cap_reported() {
        let opts = SolverOptions {
            max_iters: 3,
            check_interval: 1,
            ..SolverOptions::default()
        };
        let sol = solve(&scalar_lq(), &opts).unwrap();
        assert_eq!(sol.status.state, SolveState::IterationCap);
        assert_eq!(sol.status.iterations, 3);
        assert!(sol.status.infeasibility_score.is_some());
    }
}
