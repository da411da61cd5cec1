//! Systems, noise descriptions, quadratic constraints and policies, plus the
//! JSON problem format.
//!
//! Dynamics are `x_{k+1} = (A + Σ σ_k(i) A_i) x_k + B u_k + w_k` with
//! performance output `z_k = C x_k + D u_k` and `x_0 = 0`. The multiplicative
//! matrices stored in [`SystemModel`] are already scaled by the standard
//! deviation of their noise channel, so every `σ_k(i)` downstream has unit
//! variance.

use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{self, asymmetry, is_symmetric, sym_eig};
use crate::tolerances;

#[derive(Debug, Clone, PartialEq)]
pub struct SystemModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// Unit-variance multiplicative channels `s(i)·A_i`.
    pub multiplicative: Vec<DMatrix<f64>>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
}

impl SystemModel {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        multiplicative: Vec<DMatrix<f64>>,
        c: DMatrix<f64>,
        d: DMatrix<f64>,
    ) -> Self {
        Self {
            a,
            b,
            multiplicative,
            c,
            d,
        }
    }

    /// Scalar system with `C = (1; 0)`, `D = (0; 1)`, i.e. cost `x² + u²`.
    pub fn scalar(a: f64, b: f64, multiplicative: &[f64]) -> Self {
        Self {
            a: DMatrix::from_element(1, 1, a),
            b: DMatrix::from_element(1, 1, b),
            multiplicative: multiplicative
                .iter()
                .map(|&ai| DMatrix::from_element(1, 1, ai))
                .collect(),
            c: DMatrix::from_column_slice(2, 1, &[1.0, 0.0]),
            d: DMatrix::from_column_slice(2, 1, &[0.0, 1.0]),
        }
    }

    pub fn states(&self) -> usize {
        self.a.nrows()
    }

    pub fn inputs(&self) -> usize {
        self.b.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.c.nrows()
    }

    pub fn channels(&self) -> usize {
        self.multiplicative.len()
    }

    /// `[A B]`
    pub fn ab(&self) -> DMatrix<f64> {
        hcat(&self.a, &self.b)
    }

    /// `[C D]`
    pub fn cd(&self) -> DMatrix<f64> {
        hcat(&self.c, &self.d)
    }

    /// `[C D]ᵀ[C D]`, the cost weight on the joint covariance.
    pub fn cost_weight(&self) -> DMatrix<f64> {
        let cd = self.cd();
        cd.transpose() * cd
    }

    /// Same model with channel `channel` multiplied by `scale`.
    pub fn with_channel_scaled(&self, channel: usize, scale: f64) -> Self {
        let mut out = self.clone();
        out.multiplicative[channel] *= scale;
        out
    }
}

fn hcat(l: &DMatrix<f64>, r: &DMatrix<f64>) -> DMatrix<f64> {
    let rows = l.nrows();
    let mut out = DMatrix::zeros(rows, l.ncols() + r.ncols());
    out.view_mut((0, 0), (rows, l.ncols())).copy_from(l);
    out.view_mut((0, l.ncols()), (rows, r.ncols())).copy_from(r);
    out
}

/// Zero-mean, unit-variance scalar distribution families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NoiseFamily {
    #[default]
    Gaussian,
    Rademacher,
    Uniform,
}

impl NoiseFamily {
    pub const ALL: [NoiseFamily; 3] = [NoiseFamily::Gaussian, NoiseFamily::Rademacher, NoiseFamily::Uniform];

    pub fn name(self) -> &'static str {
        match self {
            NoiseFamily::Gaussian => "gaussian",
            NoiseFamily::Rademacher => "rademacher",
            NoiseFamily::Uniform => "uniform",
        }
    }
}

impl fmt::Display for NoiseFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for NoiseFamily {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gaussian" => Ok(NoiseFamily::Gaussian),
            "rademacher" => Ok(NoiseFamily::Rademacher),
            "uniform" => Ok(NoiseFamily::Uniform),
            other => Err(format!("unknown distribution family `{other}` (expected gaussian, rademacher or uniform)")),
        }
    }
}

/// Second-moment data and distribution choice for each noise channel.
/// Additive noise always has identity covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    pub multiplicative_variances: Vec<f64>,
    pub additive: NoiseFamily,
    pub multiplicative: NoiseFamily,
    /// Family for the injected input noise `v_k` of affine policies.
    pub injected: NoiseFamily,
}

impl NoiseSpec {
    pub fn uniform_family(channels: usize, family: NoiseFamily) -> Self {
        Self {
            multiplicative_variances: vec![1.0; channels],
            additive: family,
            multiplicative: family,
            injected: family,
        }
    }

    pub fn with_family(&self, family: NoiseFamily) -> Self {
        Self {
            multiplicative_variances: self.multiplicative_variances.clone(),
            additive: family,
            multiplicative: family,
            injected: family,
        }
    }
}

/// Joint second moment `V = E[(x;u)(x;u)ᵀ] = [[X, R], [Rᵀ, U]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointCovariance {
    v: DMatrix<f64>,
    states: usize,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CovarianceError {
    #[error("joint covariance must be square with at least {states} rows, got {rows}x{cols}")]
    Shape { rows: usize, cols: usize, states: usize },
    #[error("joint covariance is not symmetric (asymmetry {0:e})")]
    Asymmetric(f64),
    #[error("joint covariance is not PSD (min eigenvalue {0:e})")]
    NotPsd(f64),
    #[error(transparent)]
    Numerics(#[from] numerics::NumericsError),
}

impl JointCovariance {
    /// Validating constructor: symmetric within tolerance and PSD within
    /// [`tolerances::PSD`]. The stored matrix is symmetrized.
    pub fn new(v: DMatrix<f64>, states: usize) -> Result<Self, CovarianceError> {
        Self::with_psd_tolerance(v, states, tolerances::PSD)
    }

    pub fn with_psd_tolerance(v: DMatrix<f64>, states: usize, psd_tol: f64) -> Result<Self, CovarianceError> {
        if !v.is_square() || v.nrows() < states {
            return Err(CovarianceError::Shape {
                rows: v.nrows(),
                cols: v.ncols(),
                states,
            });
        }
        if !is_symmetric(&v, tolerances::SYMMETRY) {
            return Err(CovarianceError::Asymmetric(asymmetry(&v)));
        }
        let v = numerics::symmetrize(&v);
        let eig = sym_eig(&v)?;
        let scale = 1.0 + eig.values.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        if eig.min() < -psd_tol * scale {
            return Err(CovarianceError::NotPsd(eig.min()));
        }
        Ok(Self { v, states })
    }

    /// Unvalidated constructor (symmetrizes only).
    pub fn from_matrix_unchecked(v: DMatrix<f64>, states: usize) -> Self {
        Self {
            v: numerics::symmetrize(&v),
            states,
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.v
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.v
    }

    pub fn states(&self) -> usize {
        self.states
    }

    pub fn inputs(&self) -> usize {
        self.v.nrows() - self.states
    }

    pub fn x(&self) -> DMatrix<f64> {
        self.v.view((0, 0), (self.states, self.states)).into_owned()
    }

    pub fn r(&self) -> DMatrix<f64> {
        self.v.view((0, self.states), (self.states, self.inputs())).into_owned()
    }

    pub fn u(&self) -> DMatrix<f64> {
        let n = self.states;
        let m = self.inputs();
        self.v.view((n, n), (m, m)).into_owned()
    }
}

/// Bound on a quadratic constraint: one value for every step, or a schedule.
#[derive(Debug, Clone, PartialEq)]
pub enum Gamma {
    Constant(f64),
    Schedule(Vec<f64>),
}

impl Gamma {
    /// Bound at step `k`; a schedule shorter than `k + 1` has no value.
    pub fn at(&self, k: usize) -> Option<f64> {
        match self {
            Gamma::Constant(g) => Some(*g),
            Gamma::Schedule(s) => s.get(k).copied(),
        }
    }
}

/// `E[(x;u)ᵀ Q (x;u)] <= γ`, with `Q` symmetric and possibly indefinite.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticConstraint {
    pub q: DMatrix<f64>,
    pub gamma: Gamma,
}

impl QuadraticConstraint {
    pub fn new(q: DMatrix<f64>, gamma: f64) -> Self {
        Self {
            q,
            gamma: Gamma::Constant(gamma),
        }
    }

    /// Whether the input-input block `H` of `Q = [[E, G], [Gᵀ, H]]` is PSD,
    /// i.e. the constraint is convex in `u`.
    pub fn convex_in_input(&self, states: usize) -> bool {
        let d = self.q.nrows();
        if d <= states {
            return true;
        }
        let h = self.q.view((states, states), (d - states, d - states)).into_owned();
        match sym_eig(&numerics::symmetrize(&h)) {
            Ok(eig) => {
                let scale = 1.0 + eig.values.iter().fold(0.0f64, |a, x| a.max(x.abs()));
                eig.min() >= -tolerances::PSD * scale
            }
            Err(_) => false,
        }
    }
}

/// `u_k = K_k x_k + v_k` with `E v_k v_kᵀ = Π_k`. A single entry means the
/// policy is stationary.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinePolicy {
    pub gains: Vec<DMatrix<f64>>,
    pub noise_covariances: Vec<DMatrix<f64>>,
}

impl AffinePolicy {
    pub fn stationary(gain: DMatrix<f64>, noise: DMatrix<f64>) -> Self {
        Self {
            gains: vec![gain],
            noise_covariances: vec![noise],
        }
    }

    /// Zero policy for `inputs × states`.
    pub fn zero(inputs: usize, states: usize) -> Self {
        Self::stationary(DMatrix::zeros(inputs, states), DMatrix::zeros(inputs, inputs))
    }

    pub fn is_stationary(&self) -> bool {
        self.gains.len() == 1
    }

    pub fn horizon(&self) -> usize {
        self.gains.len()
    }

    pub fn gain(&self, k: usize) -> &DMatrix<f64> {
        if self.is_stationary() {
            &self.gains[0]
        } else {
            &self.gains[k]
        }
    }

    pub fn noise(&self, k: usize) -> &DMatrix<f64> {
        if self.is_stationary() {
            &self.noise_covariances[0]
        } else {
            &self.noise_covariances[k]
        }
    }
}

/// Horizon of the control problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Infinite,
    Finite { horizon: usize },
}

impl Mode {
    pub fn horizon(self) -> Option<usize> {
        match self {
            Mode::Infinite => None,
            Mode::Finite { horizon } => Some(horizon),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Infinite => "infinite",
            Mode::Finite { .. } => "finite",
        }
    }
}

/// One problem found by [`validate`].
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    Dimension {
        what: String,
        expected: String,
        found: String,
    },
    Asymmetric {
        what: String,
        asymmetry: f64,
    },
    NonFinite {
        what: String,
    },
    CostWeightNotDefinite {
        min_eigenvalue: f64,
        threshold: f64,
    },
    CostWeightNotSemidefinite {
        min_eigenvalue: f64,
    },
    NonPositiveVariance {
        channel: usize,
        variance: f64,
    },
    Schedule {
        constraint: usize,
        expected: String,
        found: usize,
    },
    Horizon {
        found: usize,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Dimension { what, expected, found } => {
                write!(f, "{what}: expected {expected}, found {found}")
            }
            Violation::Asymmetric { what, asymmetry } => {
                write!(f, "{what} is not symmetric (max asymmetry {asymmetry:e})")
            }
            Violation::NonFinite { what } => write!(f, "{what} has non-finite entries"),
            Violation::CostWeightNotDefinite { min_eigenvalue, threshold } => write!(
                f,
                "[C D]ᵀ[C D] is not positive definite (min eigenvalue {min_eigenvalue:e} < {threshold:e}); required for infinite horizon"
            ),
            Violation::CostWeightNotSemidefinite { min_eigenvalue } => {
                write!(f, "[C D]ᵀ[C D] is not PSD (min eigenvalue {min_eigenvalue:e})")
            }
            Violation::NonPositiveVariance { channel, variance } => {
                write!(f, "multiplicative channel {channel} has non-positive variance {variance}")
            }
            Violation::Schedule {
                constraint,
                expected,
                found,
            } => write!(f, "constraint {constraint}: gamma schedule length {found}, expected {expected}"),
            Violation::Horizon { found } => write!(f, "horizon must be positive, found {found}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, v: Violation) {
        self.violations.push(v);
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

fn shape(m: &DMatrix<f64>) -> String {
    format!("{}x{}", m.nrows(), m.ncols())
}

fn check_shape(report: &mut ValidationReport, what: &str, m: &DMatrix<f64>, rows: usize, cols: usize) -> bool {
    if m.nrows() != rows || m.ncols() != cols {
        report.push(Violation::Dimension {
            what: what.to_string(),
            expected: format!("{rows}x{cols}"),
            found: shape(m),
        });
        return false;
    }
    true
}

fn check_finite(report: &mut ValidationReport, what: &str, m: &DMatrix<f64>) -> bool {
    if m.iter().any(|v| !v.is_finite()) {
        report.push(Violation::NonFinite { what: what.to_string() });
        return false;
    }
    true
}

/// Collects every violation of the model/constraint invariants. `horizon`
/// is `None` for infinite-horizon synthesis, which additionally needs
/// `[C D]ᵀ[C D] ≻ 0`.
pub fn validate(model: &SystemModel, constraints: &[QuadraticConstraint], horizon: Option<usize>) -> ValidationReport {
    let mut report = ValidationReport::default();
    let n = model.a.nrows();
    let m = model.b.ncols();
    let p = model.c.nrows();

    let mut dims_ok = true;
    dims_ok &= check_shape(&mut report, "A", &model.a, n, n);
    dims_ok &= check_shape(&mut report, "B", &model.b, n, m);
    for (i, ai) in model.multiplicative.iter().enumerate() {
        dims_ok &= check_shape(&mut report, &format!("multiplicative[{i}]"), ai, n, n);
    }
    dims_ok &= check_shape(&mut report, "C", &model.c, p, n);
    dims_ok &= check_shape(&mut report, "D", &model.d, p, m);
    for (j, con) in constraints.iter().enumerate() {
        let what = format!("constraints[{j}].Q");
        if check_shape(&mut report, &what, &con.q, n + m, n + m) {
            if !check_finite(&mut report, &what, &con.q) {
                continue;
            }
            if !is_symmetric(&con.q, tolerances::SYMMETRY) {
                report.push(Violation::Asymmetric {
                    what,
                    asymmetry: asymmetry(&con.q),
                });
            }
        } else {
            dims_ok = false;
        }
        match (&con.gamma, horizon) {
            (Gamma::Constant(g), _) if !g.is_finite() => report.push(Violation::NonFinite {
                what: format!("constraints[{j}].gamma"),
            }),
            (Gamma::Schedule(s), None) => report.push(Violation::Schedule {
                constraint: j,
                expected: "a scalar for infinite horizon".to_string(),
                found: s.len(),
            }),
            (Gamma::Schedule(s), Some(h)) if s.len() != h => report.push(Violation::Schedule {
                constraint: j,
                expected: h.to_string(),
                found: s.len(),
            }),
            (Gamma::Schedule(s), Some(_)) if s.iter().any(|g| !g.is_finite()) => report.push(Violation::NonFinite {
                what: format!("constraints[{j}].gamma"),
            }),
            _ => {}
        }
    }
    if let Some(h) = horizon {
        if h == 0 {
            report.push(Violation::Horizon { found: 0 });
        }
    }

    let mut finite = true;
    finite &= check_finite(&mut report, "A", &model.a);
    finite &= check_finite(&mut report, "B", &model.b);
    for (i, ai) in model.multiplicative.iter().enumerate() {
        finite &= check_finite(&mut report, &format!("multiplicative[{i}]"), ai);
    }
    finite &= check_finite(&mut report, "C", &model.c);
    finite &= check_finite(&mut report, "D", &model.d);

    if dims_ok && finite {
        let w = model.cost_weight();
        match sym_eig(&numerics::symmetrize(&w)) {
            Ok(eig) => {
                let lmin = eig.min();
                let d = (n + m).max(1) as f64;
                if horizon.is_none() {
                    let threshold = tolerances::DEFINITENESS * (w.trace() / d);
                    if lmin < threshold || w.trace() <= 0.0 {
                        report.push(Violation::CostWeightNotDefinite {
                            min_eigenvalue: lmin,
                            threshold,
                        });
                    }
                } else if lmin < -tolerances::DEFINITENESS * (1.0 + w.trace() / d) {
                    report.push(Violation::CostWeightNotSemidefinite { min_eigenvalue: lmin });
                }
            }
            Err(_) => report.push(Violation::NonFinite {
                what: "[C D]ᵀ[C D]".to_string(),
            }),
        }
    }
    report
}

// ---------------------------------------------------------------------------
// JSON problem format

/// Row-major matrix as it appears in the problem file.
pub type RowMajor = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultiplicativeEntry {
    #[serde(rename = "Ai")]
    pub ai: RowMajor,
    #[serde(default = "unit_variance")]
    pub variance: f64,
}

fn unit_variance() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GammaValue {
    Scalar(f64),
    Schedule(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintEntry {
    #[serde(rename = "Q")]
    pub q: RowMajor,
    pub gamma: GammaValue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeName {
    Infinite,
    Finite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Distributions {
    #[serde(default)]
    pub additive: NoiseFamily,
    #[serde(default)]
    pub multiplicative: NoiseFamily,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub injected: Option<NoiseFamily>,
}

/// The problem document exactly as written on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemFile {
    #[serde(rename = "A")]
    pub a: RowMajor,
    #[serde(rename = "B")]
    pub b: RowMajor,
    #[serde(default)]
    pub multiplicative: Vec<MultiplicativeEntry>,
    #[serde(rename = "C")]
    pub c: RowMajor,
    #[serde(rename = "D")]
    pub d: RowMajor,
    #[serde(default)]
    pub constraints: Vec<ConstraintEntry>,
    pub mode: ModeName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distributions: Option<Distributions>,
}

/// A parsed and validated problem.
#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    pub model: SystemModel,
    pub noise: NoiseSpec,
    pub constraints: Vec<QuadraticConstraint>,
    pub mode: Mode,
    pub source: ProblemFile,
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("parse error at `{path}` (line {line}, column {column}): {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("matrix `{what}` has ragged rows")]
    Ragged { what: String },
    #[error("`horizon` is required when mode is \"finite\" and must be absent otherwise")]
    Horizon,
    #[error("invalid problem: {0}")]
    Invalid(ValidationReport),
}

fn to_matrix(what: &str, rows: &RowMajor, cols_if_empty: usize) -> Result<DMatrix<f64>, ModelError> {
    let r = rows.len();
    let c = rows.first().map_or(cols_if_empty, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(ModelError::Ragged { what: what.to_string() });
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

pub fn to_row_major(m: &DMatrix<f64>) -> RowMajor {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

impl ProblemFile {
    pub fn mode(&self) -> Result<Mode, ModelError> {
        match (self.mode, self.horizon) {
            (ModeName::Infinite, None) => Ok(Mode::Infinite),
            (ModeName::Finite, Some(h)) => Ok(Mode::Finite { horizon: h }),
            _ => Err(ModelError::Horizon),
        }
    }

    /// Build the internal model (multiplicative matrices scaled by `√variance`)
    /// without validating it.
    pub fn to_parts(&self) -> Result<(SystemModel, NoiseSpec, Vec<QuadraticConstraint>), ModelError> {
        let a = to_matrix("A", &self.a, 0)?;
        let n = a.nrows();
        let b = to_matrix("B", &self.b, 0)?;
        let c = to_matrix("C", &self.c, n)?;
        let d = to_matrix("D", &self.d, b.ncols())?;
        let mut multiplicative = Vec::with_capacity(self.multiplicative.len());
        let mut variances = Vec::with_capacity(self.multiplicative.len());
        for (i, entry) in self.multiplicative.iter().enumerate() {
            let ai = to_matrix(&format!("multiplicative[{i}].Ai"), &entry.ai, n)?;
            variances.push(entry.variance);
            multiplicative.push(ai * entry.variance.sqrt());
        }
        let mut constraints = Vec::with_capacity(self.constraints.len());
        for (j, entry) in self.constraints.iter().enumerate() {
            let q = to_matrix(&format!("constraints[{j}].Q"), &entry.q, 0)?;
            let gamma = match &entry.gamma {
                GammaValue::Scalar(g) => Gamma::Constant(*g),
                GammaValue::Schedule(s) => Gamma::Schedule(s.clone()),
            };
            constraints.push(QuadraticConstraint { q, gamma });
        }
        let dist = self.distributions.clone().unwrap_or(Distributions {
            additive: NoiseFamily::Gaussian,
            multiplicative: NoiseFamily::Gaussian,
            injected: None,
        });
        let noise = NoiseSpec {
            multiplicative_variances: variances,
            additive: dist.additive,
            multiplicative: dist.multiplicative,
            injected: dist.injected.unwrap_or(dist.additive),
        };
        Ok((SystemModel::new(a, b, multiplicative, c, d), noise, constraints))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("problem files always serialize")
    }
}

/// Parse and validate a JSON problem document.
pub fn load_problem(text: &str) -> Result<Problem, ModelError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let source: ProblemFile = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        ModelError::Parse {
            path,
            line: inner.line(),
            column: inner.column(),
            message: inner.to_string(),
        }
    })?;
    Problem::from_file(source)
}

impl Problem {
    pub fn from_file(source: ProblemFile) -> Result<Self, ModelError> {
        let mode = source.mode()?;
        let (model, noise, mut constraints) = source.to_parts()?;
        let mut report = validate(&model, &constraints, mode.horizon());
        for (i, &var) in noise.multiplicative_variances.iter().enumerate() {
            if !(var > 0.0) || !var.is_finite() {
                report.violations.push(Violation::NonPositiveVariance {
                    channel: i,
                    variance: var,
                });
            }
        }
        if !report.is_valid() {
            return Err(ModelError::Invalid(report));
        }
        for con in &mut constraints {
            numerics::symmetrize_in_place(&mut con.q);
        }
        Ok(Self {
            model,
            noise,
            constraints,
            mode,
            source,
        })
    }

    pub fn to_json(&self) -> String {
        self.source.to_json()
    }
}
