//! The versioned JSON report and its deterministic encoding.

use std::io;

use covsynth::model::{to_row_major, ProblemFile, RowMajor};
use covsynth::synthesis::SynthesisResult;
use serde::{Deserialize, Serialize};
use serde_json::ser::Formatter;

pub const SCHEMA: &str = "covctl-report/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub schema: String,
    pub tool_version: String,
    /// `solve` or `stabilizable`.
    pub command: String,
    pub problem: ProblemFile,
    pub mode: String,
    pub horizon: Option<usize>,
    /// Solver state name.
    pub status: String,
    /// Stabilizability verdict, for `stabilizable` reports.
    pub verdict: Option<String>,
    pub objective: Option<f64>,
    pub rms_cost: Option<f64>,
    /// `V` for stationary solves, `V_k` per step otherwise.
    pub covariances: Vec<RowMajor>,
    pub gains: Vec<RowMajor>,
    /// Injected noise covariances `Π_k`.
    pub noise_covariances: Vec<RowMajor>,
    /// `tr(Q_j V_k) − γ_j(k)`, indexed `[j][k]`.
    pub constraint_activity: Vec<Vec<Option<f64>>>,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Diagnostics {
    pub iterations: usize,
    pub primal_residual: Option<f64>,
    pub dual_residual: Option<f64>,
    pub gap: Option<f64>,
    pub dual_objective: Option<f64>,
    pub infeasibility_score: Option<f64>,
    pub equality_residual: Option<f64>,
    pub worst_inequality: Option<f64>,
    pub min_eigenvalue: Option<f64>,
}

/// `None` for values JSON cannot carry.
pub fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

impl Diagnostics {
    pub fn from_status(status: &covsynth::sdp::SolveStatus) -> Self {
        Self {
            iterations: status.iterations,
            primal_residual: finite(status.primal_residual),
            dual_residual: finite(status.dual_residual),
            gap: finite(status.gap),
            dual_objective: finite(status.dual_objective),
            infeasibility_score: status.infeasibility_score.and_then(finite),
            ..Self::default()
        }
    }
}

impl Report {
    /// A report with the solver outcome but no solution attached.
    pub fn empty(command: &str, problem: &ProblemFile, mode: &str, horizon: Option<usize>, status: &covsynth::sdp::SolveStatus) -> Self {
        Self {
            schema: SCHEMA.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            problem: problem.clone(),
            mode: mode.to_string(),
            horizon,
            status: status.state.name().to_string(),
            verdict: None,
            objective: None,
            rms_cost: None,
            covariances: Vec::new(),
            gains: Vec::new(),
            noise_covariances: Vec::new(),
            constraint_activity: Vec::new(),
            diagnostics: Diagnostics::from_status(status),
        }
    }

    pub fn from_synthesis(problem: &ProblemFile, result: &SynthesisResult) -> Self {
        let mut r = Self::empty("solve", problem, result.mode.name(), result.mode.horizon(), &result.status);
        r.objective = finite(result.objective);
        r.rms_cost = finite(result.rms_cost());
        r.covariances = result.covariances.iter().map(|v| to_row_major(v.matrix())).collect();
        r.gains = result.policy.gains.iter().map(to_row_major).collect();
        r.noise_covariances = result.policy.noise_covariances.iter().map(to_row_major).collect();
        r.constraint_activity = result
            .constraint_activity
            .iter()
            .map(|row| row.iter().copied().map(finite).collect())
            .collect();
        r.diagnostics.equality_residual = finite(result.check.equality_residual);
        r.diagnostics.worst_inequality = finite(result.check.worst_inequality);
        r.diagnostics.min_eigenvalue = finite(result.check.min_eigenvalue());
        r
    }
}

/// Every float as `{:.16e}`, i.e. 17 significant digits.
struct FixedFloats;

impl Formatter for FixedFloats {
    fn write_f64<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, value as f64)
    }
}

/// Sorted keys and fixed float formatting, independent of struct field order.
pub fn to_canonical_json<T: Serialize>(value: &T) -> serde_json::Result<String> {
    // `serde_json::Map` is ordered by key without the preserve_order feature.
    let tree = serde_json::to_value(value)?;
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, FixedFloats);
    tree.serialize(&mut ser)?;
    out.push(b'\n');
    Ok(String::from_utf8(out).expect("serde_json writes UTF-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use covsynth::example;
    use covsynth::sdp::{SolveState, SolveStatus};

    fn status() -> SolveStatus {
        SolveStatus {
            state: SolveState::Optimal,
            primal_residual: 1.0 / 3.0,
            dual_residual: f64::NAN,
            gap: -0.0,
            objective: 1841.4075,
            dual_objective: 1e-300,
            iterations: 17,
            infeasibility_score: None,
        }
    }

    #[test]
    fn keys_are_sorted_and_floats_fixed() {
        let r = Report::empty("solve", &example::problem().source, "infinite", None, &status());
        let text = to_canonical_json(&r).unwrap();
        let keys: Vec<&str> = ["\"command\"", "\"constraint_activity\"", "\"covariances\"", "\"diagnostics\"", "\"gains\""]
            .into_iter()
            .collect();
        let pos: Vec<usize> = keys.iter().map(|k| text.find(k).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]), "{text}");
        assert!(text.contains("\"primal_residual\":3.3333333333333331e-1"), "{text}");
        assert!(text.contains("\"dual_residual\":null"));
        assert!(text.contains("\"gap\":-0.0000000000000000e0"));
    }

    #[test]
    fn round_trip_is_exact() {
        let mut r = Report::empty("solve", &example::problem().source, "infinite", None, &status());
        r.objective = Some(0.1 + 0.2);
        r.covariances = vec![vec![vec![std::f64::consts::PI, -1e-17], vec![-1e-17, 5e300]]];
        r.constraint_activity = vec![vec![Some(-2.5e-9), None]];
        let text = to_canonical_json(&r).unwrap();
        let back: Report = serde_json::from_str(&text).unwrap();
        assert_eq!(back, r);
        assert_eq!(to_canonical_json(&back).unwrap(), text);
    }
}
