//! Monte Carlo rollouts of the closed loop
//! `x_{k+1} = (A + Σ σ_k(i) A_i) x_k + B u_k + w_k`, `u_k = K_k x_k + v_k`.
//!
//! Every (run, channel) pair draws from its own ChaCha stream, so a path
//! depends only on the seed and its run index. Runs are processed in fixed
//! chunks and the chunk sums are combined in order, which makes the
//! statistics independent of the thread count.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AffinePolicy, NoiseFamily, NoiseSpec, QuadraticConstraint, SystemModel};
use crate::numerics::{psd_sqrt_factor, PsdFactorError};
use crate::tolerances;

const SQRT3: f64 = 1.732_050_807_568_877_2;

/// Runs per work unit. Fixed so the reduction tree never depends on the pool.
const CHUNK: usize = 8;

/// Draw `len` i.i.d. zero-mean unit-variance samples.
pub fn sample_unit_noise<R: Rng + ?Sized>(family: NoiseFamily, len: usize, rng: &mut R) -> Vec<f64> {
    let mut out = vec![0.0; len];
    fill_unit_noise(family, &mut out, rng);
    out
}

pub fn fill_unit_noise<R: Rng + ?Sized>(family: NoiseFamily, out: &mut [f64], rng: &mut R) {
    match family {
        NoiseFamily::Gaussian => out.iter_mut().for_each(|x| *x = rng.sample(StandardNormal)),
        NoiseFamily::Rademacher => out.iter_mut().for_each(|x| *x = if rng.gen::<bool>() { 1.0 } else { -1.0 }),
        NoiseFamily::Uniform => out.iter_mut().for_each(|x| *x = rng.gen_range(-SQRT3..SQRT3)),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutConfig {
    pub steps: usize,
    pub runs: usize,
    pub seed: u64,
    pub noise: NoiseSpec,
    /// Leading fraction of each run left out of the stationary averages.
    pub burn_in: f64,
}

impl RolloutConfig {
    pub fn new(steps: usize, runs: usize, seed: u64, noise: NoiseSpec) -> Self {
        Self {
            steps,
            runs,
            seed,
            noise,
            burn_in: 0.1,
        }
    }

    /// First step that enters the stationary averages.
    pub fn burn_in_steps(&self) -> usize {
        ((self.steps as f64 * self.burn_in).floor() as usize).min(self.steps.saturating_sub(1))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimulationError {
    #[error("state norm {norm:e} exceeded the overflow bound at step {step} of run {run}")]
    Overflow { run: usize, step: usize, norm: f64 },
    #[error("policy covers {horizon} steps but {steps} were requested")]
    Horizon { horizon: usize, steps: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("steps and runs must both be positive")]
    Empty,
    #[error("injected noise covariance at step {step}: {source}")]
    NoiseFactor { step: usize, source: PsdFactorError },
}

/// Mean across runs and its standard error. The error is `NaN` (written as
/// `null`) with fewer than two runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    #[serde(with = "nan_as_null")]
    pub se: f64,
}

impl Estimate {
    /// `(mean − target) / se`.
    pub fn z_score(&self, target: f64) -> f64 {
        (self.mean - target) / self.se
    }

    /// z-score of the difference of two independent estimates.
    pub fn z_against(&self, other: &Estimate) -> f64 {
        (self.mean - other.mean) / self.se.hypot(other.se)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixEstimate {
    #[serde(with = "matrix_rows")]
    pub mean: DMatrix<f64>,
    #[serde(with = "matrix_rows")]
    pub se: DMatrix<f64>,
}

impl MatrixEstimate {
    /// Largest `|mean − target| / se` over the entries. Entries with zero
    /// error count as zero when they match exactly.
    pub fn max_z(&self, target: &DMatrix<f64>) -> f64 {
        self.mean
            .iter()
            .zip(self.se.iter())
            .zip(target.iter())
            .map(|((m, s), t)| {
                let d = (m - t).abs();
                if d == 0.0 {
                    0.0
                } else {
                    d / s
                }
            })
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalStats {
    pub steps: usize,
    pub runs: usize,
    pub burn_in: usize,
    /// Time-average of `z_kᵀz_k` over the post-burn-in steps of a run,
    /// then across runs.
    pub cost: Estimate,
    /// `E z_kᵀ z_k` at each step.
    pub cost_per_step: Vec<Estimate>,
    /// Stationary `V̂` from the post-burn-in steps.
    pub covariance: MatrixEstimate,
    /// `V̂_k` at each step.
    pub covariance_per_step: Vec<MatrixEstimate>,
    /// `tr(Q_j V̂)` for each constraint passed to the rollout.
    pub constraint_values: Vec<Estimate>,
    /// Stationary `E[x_k v_kᵀ]` of state and injected noise.
    pub state_noise_correlation: MatrixEstimate,
    /// Per step, the largest entry of `|X̂_{k+1} − prop(V̂_k)|` in units of
    /// its standard error (`steps − 1` entries).
    pub recursion_deviation: Vec<f64>,
}

mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

/// Matrices as lists of rows; non-finite entries become `null`.
mod matrix_rows {
    use nalgebra::DMatrix;
    use serde::{de::Error, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<Option<f64>>> = (0..m.nrows())
            .map(|i| (0..m.ncols()).map(|j| Some(m[(i, j)]).filter(|v| v.is_finite())).collect())
            .collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<Option<f64>>>::deserialize(d)?;
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(D::Error::custom("ragged matrix"));
        }
        Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j].unwrap_or(f64::NAN)))
    }
}

/// Sums over the runs of one chunk.
struct Partial {
    /// Per step: cost, then `V` entries (column-major), then the
    /// recursion-difference entries of the next state.
    step_sum: Vec<f64>,
    step_sq: Vec<f64>,
    /// Per run, in run order: stationary cost, `V` entries, constraint
    /// values, `x vᵀ` entries.
    per_run: Vec<Vec<f64>>,
}

struct Layout {
    n: usize,
    m: usize,
    d: usize,
    width: usize,
}

impl Layout {
    fn new(model: &SystemModel) -> Self {
        let n = model.states();
        let m = model.inputs();
        let d = n + m;
        Self {
            n,
            m,
            d,
            width: 1 + d * d + n * n,
        }
    }
}

/// Per-step data the dynamics need, precomputed once.
struct Plan<'a> {
    model: &'a SystemModel,
    constraints: Vec<DMatrix<f64>>,
    gains: Vec<&'a DMatrix<f64>>,
    factors: Vec<DMatrix<f64>>,
    cost: DMatrix<f64>,
    layout: Layout,
    config: &'a RolloutConfig,
}

fn plan<'a>(
    model: &'a SystemModel,
    policy: &'a AffinePolicy,
    constraints: &[QuadraticConstraint],
    config: &'a RolloutConfig,
) -> Result<Plan<'a>, SimulationError> {
    if config.steps == 0 || config.runs == 0 {
        return Err(SimulationError::Empty);
    }
    let layout = Layout::new(model);
    if !policy.is_stationary() && policy.horizon() < config.steps {
        return Err(SimulationError::Horizon {
            horizon: policy.horizon(),
            steps: config.steps,
        });
    }
    let distinct = if policy.is_stationary() { 1 } else { config.steps };
    let mut gains = Vec::with_capacity(distinct);
    let mut factors = Vec::with_capacity(distinct);
    for k in 0..distinct {
        let g = policy.gain(k);
        let pi = policy.noise(k);
        if g.shape() != (layout.m, layout.n) || pi.shape() != (layout.m, layout.m) {
            return Err(SimulationError::Dimension(format!(
                "step {k}: gain is {}x{}, noise {}x{}, expected {}x{} and {}x{}",
                g.nrows(),
                g.ncols(),
                pi.nrows(),
                pi.ncols(),
                layout.m,
                layout.n,
                layout.m,
                layout.m
            )));
        }
        gains.push(g);
        factors.push(psd_sqrt_factor(pi, tolerances::PI_FACTOR_CLAMP).map_err(|source| SimulationError::NoiseFactor { step: k, source })?);
    }
    for c in constraints {
        if c.q.shape() != (layout.d, layout.d) {
            return Err(SimulationError::Dimension(format!("constraint matrix must be {0}x{0}", layout.d)));
        }
    }
    Ok(Plan {
        model,
        constraints: constraints.iter().map(|c| c.q.clone()).collect(),
        gains,
        factors,
        cost: model.cost_weight(),
        layout,
        config,
    })
}

impl Plan<'_> {
    fn at(&self, k: usize) -> usize {
        if self.gains.len() == 1 {
            0
        } else {
            k
        }
    }

    fn per_run_width(&self) -> usize {
        let Layout { n, m, d, .. } = self.layout;
        1 + d * d + self.constraints.len() + n * m
    }

    fn run_chunk(&self, first: usize, last: usize) -> Result<Partial, SimulationError> {
        let Layout { n, m, d, width } = self.layout;
        let steps = self.config.steps;
        let burn = self.config.burn_in_steps();
        let kept = (steps - burn) as f64;
        let channels = self.model.channels();
        let streams = 2 + channels as u64;
        let ab = self.model.ab();

        let mut step_sum = vec![0.0; steps * width];
        let mut step_sq = vec![0.0; steps * width];
        let mut per_run = Vec::with_capacity(last - first);

        let mut xi = DVector::zeros(d);
        let mut w = vec![0.0; n];
        let mut v = vec![0.0; m];
        let mut sigma = vec![0.0; channels];
        let mut diff = DMatrix::zeros(n, n);

        for run in first..last {
            let stream = |ch: u64| {
                let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
                rng.set_stream(run as u64 * streams + ch);
                rng
            };
            let mut rng_w = stream(0);
            let mut rng_v = stream(1);
            let mut rng_s: Vec<ChaCha8Rng> = (0..channels as u64).map(|i| stream(2 + i)).collect();

            let mut x = DVector::<f64>::zeros(n);
            let mut acc = vec![0.0; self.per_run_width()];
            let mut vv = DMatrix::<f64>::zeros(d, d);
            let mut xv = DMatrix::<f64>::zeros(n, m);
            for k in 0..steps {
                let j = self.at(k);
                fill_unit_noise(self.config.noise.injected, &mut v, &mut rng_v);
                let vk = &self.factors[j] * DVector::from_column_slice(&v);
                let u = self.gains[j] * &x + &vk;
                xi.rows_mut(0, n).copy_from(&x);
                xi.rows_mut(n, m).copy_from(&u);
                let outer = &xi * xi.transpose();
                let cost = (&self.cost * &xi).dot(&xi);

                let row = &mut step_sum[k * width..(k + 1) * width];
                let row_sq = &mut step_sq[k * width..(k + 1) * width];
                row[0] += cost;
                row_sq[0] += cost * cost;
                for (t, val) in outer.iter().enumerate() {
                    row[1 + t] += val;
                    row_sq[1 + t] += val * val;
                }
                if k >= burn {
                    acc[0] += cost;
                    vv += &outer;
                    xv += &x * vk.transpose();
                }

                fill_unit_noise(self.config.noise.additive, &mut w, &mut rng_w);
                let mut next = &ab * &xi + DVector::from_column_slice(&w);
                for (i, ai) in self.model.multiplicative.iter().enumerate() {
                    fill_unit_noise(self.config.noise.multiplicative, &mut sigma[i..i + 1], &mut rng_s[i]);
                    next += ai * &x * sigma[i];
                }
                let norm = next.norm();
                if !(norm <= tolerances::OVERFLOW_NORM) {
                    return Err(SimulationError::Overflow { run, step: k + 1, norm });
                }

                // Paired difference x⁺x⁺ᵀ − prop(ξξᵀ); its mean is zero exactly
                // when the covariance recursion holds.
                if k + 1 < steps {
                    let mut prop = &ab * &outer * ab.transpose();
                    for ai in &self.model.multiplicative {
                        prop += ai * (&x * x.transpose()) * ai.transpose();
                    }
                    for i in 0..n {
                        prop[(i, i)] += 1.0;
                    }
                    diff.copy_from(&(&next * next.transpose() - prop));
                    let row = &mut step_sum[(k + 1) * width..(k + 2) * width];
                    let row_sq = &mut step_sq[(k + 1) * width..(k + 2) * width];
                    for (t, val) in diff.iter().enumerate() {
                        row[1 + d * d + t] += val;
                        row_sq[1 + d * d + t] += val * val;
                    }
                }
                x = next;
            }

            acc[0] /= kept;
            vv /= kept;
            xv /= kept;
            for (t, val) in vv.iter().enumerate() {
                acc[1 + t] = *val;
            }
            for (j, q) in self.constraints.iter().enumerate() {
                acc[1 + d * d + j] = crate::numerics::trace_product(q, &vv);
            }
            let off = 1 + d * d + self.constraints.len();
            for (t, val) in xv.iter().enumerate() {
                acc[off + t] = *val;
            }
            per_run.push(acc);
        }
        Ok(Partial { step_sum, step_sq, per_run })
    }
}

fn estimate(sum: f64, sq: f64, count: usize) -> Estimate {
    let c = count as f64;
    let mean = sum / c;
    let se = if count < 2 {
        f64::NAN
    } else {
        ((sq - c * mean * mean).max(0.0) / (c - 1.0) / c).sqrt()
    };
    Estimate { mean, se }
}

fn matrix_estimate(rows: usize, cols: usize, f: impl Fn(usize) -> Estimate) -> MatrixEstimate {
    let mut mean = DMatrix::zeros(rows, cols);
    let mut se = DMatrix::zeros(rows, cols);
    for t in 0..rows * cols {
        let e = f(t);
        mean[t] = e.mean;
        se[t] = e.se;
    }
    MatrixEstimate { mean, se }
}

/// Simulate `config.runs` independent paths from `x_0 = 0`. Standard errors
/// are taken across runs.
pub fn rollout(
    model: &SystemModel,
    policy: &AffinePolicy,
    constraints: &[QuadraticConstraint],
    config: &RolloutConfig,
) -> Result<EmpiricalStats, SimulationError> {
    let plan = plan(model, policy, constraints, config)?;
    let chunks: Vec<(usize, usize)> = (0..config.runs)
        .step_by(CHUNK)
        .map(|s| (s, (s + CHUNK).min(config.runs)))
        .collect();
    let partials: Vec<Result<Partial, SimulationError>> = chunks.par_iter().map(|&(a, b)| plan.run_chunk(a, b)).collect();

    let Layout { n, m, d, width } = plan.layout;
    let steps = config.steps;
    let mut step_sum = vec![0.0; steps * width];
    let mut step_sq = vec![0.0; steps * width];
    let mut per_run = Vec::with_capacity(config.runs);
    for p in partials {
        // The first failing chunk in run order decides the reported error.
        let p = p?;
        for (s, v) in step_sum.iter_mut().zip(&p.step_sum) {
            *s += v;
        }
        for (s, v) in step_sq.iter_mut().zip(&p.step_sq) {
            *s += v;
        }
        per_run.extend(p.per_run);
    }

    let runs = config.runs;
    let at = |k: usize, t: usize| estimate(step_sum[k * width + t], step_sq[k * width + t], runs);
    let cost_per_step = (0..steps).map(|k| at(k, 0)).collect();
    let covariance_per_step = (0..steps).map(|k| matrix_estimate(d, d, |t| at(k, 1 + t))).collect();
    let recursion_deviation = (1..steps)
        .map(|k| {
            (0..n * n)
                .map(|t| {
                    let e = at(k, 1 + d * d + t);
                    if e.mean == 0.0 {
                        0.0
                    } else {
                        e.mean.abs() / e.se
                    }
                })
                .fold(0.0, f64::max)
        })
        .collect();

    let column = |i: usize| {
        let (mut s, mut q) = (0.0, 0.0);
        for r in &per_run {
            s += r[i];
            q += r[i] * r[i];
        }
        estimate(s, q, runs)
    };
    let off = 1 + d * d + constraints.len();
    Ok(EmpiricalStats {
        steps,
        runs,
        burn_in: config.burn_in_steps(),
        cost: column(0),
        cost_per_step,
        covariance: matrix_estimate(d, d, |t| column(1 + t)),
        covariance_per_step,
        constraint_values: (0..constraints.len()).map(|j| column(1 + d * d + j)).collect(),
        state_noise_correlation: matrix_estimate(n, m, |t| column(off + t)),
        recursion_deviation,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecursionCheck {
    /// Largest deviation over all steps, in standard errors.
    pub max_deviation: f64,
    /// Step `k + 1` whose `X̂` deviates most from `prop(V̂_k)`.
    pub worst_step: usize,
    pub per_step: Vec<f64>,
}

/// Check `X̂_{k+1} ≈ [A B] V̂_k [A B]ᵀ + Σ A_i X̂_k A_iᵀ + I` at every step,
/// with each entry normalized by the standard error of the difference.
pub fn verify_recursion(model: &SystemModel, policy: &AffinePolicy, config: &RolloutConfig) -> Result<RecursionCheck, SimulationError> {
    let stats = rollout(model, policy, &[], config)?;
    let (worst_step, max_deviation) = stats
        .recursion_deviation
        .iter()
        .enumerate()
        .fold((0, 0.0), |(bk, bv), (k, &v)| if v > bv || v.is_nan() { (k + 1, v) } else { (bk, bv) });
    Ok(RecursionCheck {
        max_deviation,
        worst_step,
        per_step: stats.recursion_deviation,
    })
}
