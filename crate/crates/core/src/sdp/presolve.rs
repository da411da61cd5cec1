//! Redundant-row removal and Ruiz equilibration.

use log::{info, warn};
use thiserror::Error;

use super::problem::{ConicSdp, LinearRow};
use super::sparse::Csr;

const RUIZ_PASSES: usize = 25;
const NORM_FLOOR: f64 = 1e-4;
const NORM_CEIL: f64 = 1e4;
const DEPENDENCE_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PresolveError {
    #[error("block {block} has dimension zero")]
    EmptyBlock { block: usize },
    #[error("cost has {found} blocks, expected {expected}")]
    CostBlocks { expected: usize, found: usize },
    #[error("row references coordinate {coordinate} but the program has {len}")]
    Coordinate { coordinate: usize, len: usize },
    #[error("row has a non-finite entry")]
    NonFinite,
}

/// Diagonal scalings applied to the stacked constraint matrix `[A; G; -I]`.
/// The scaled matrix is `E · [A; G; -I] · D`, the scaled right-hand side is
/// `primal · E · b` and the scaled cost is `dual · D · c`.
#[derive(Debug, Clone, PartialEq)]
pub struct Scaling {
    pub columns: Vec<f64>,
    pub equality_rows: Vec<f64>,
    pub inequality_rows: Vec<f64>,
    /// One factor per PSD block, so the cone is mapped onto itself.
    pub block_rows: Vec<f64>,
    pub primal: f64,
    pub dual: f64,
}

impl Scaling {
    /// Every factor, for range diagnostics.
    pub fn factors(&self) -> impl Iterator<Item = f64> + '_ {
        self.columns
            .iter()
            .chain(&self.equality_rows)
            .chain(&self.inequality_rows)
            .chain(&self.block_rows)
            .copied()
    }
}

/// A presolved program plus everything the iteration needs.
#[derive(Debug, Clone)]
pub struct Presolved {
    /// The program with redundant equality rows removed (unscaled).
    pub problem: ConicSdp,
    /// Indices (into the original equality list) of the dropped rows.
    pub dropped_equalities: Vec<usize>,
    pub scaling: Scaling,
    pub(crate) stacked: Csr,
    pub(crate) scaled: Csr,
    pub(crate) rhs: Vec<f64>,
    pub(crate) cost: Vec<f64>,
    pub(crate) row_scale: Vec<f64>,
}

impl Presolved {
    pub fn equality_count(&self) -> usize {
        self.problem.equalities.len()
    }

    pub fn inequality_count(&self) -> usize {
        self.problem.inequalities.len()
    }
}

fn check(problem: &ConicSdp) -> Result<(), PresolveError> {
    if let Some(block) = problem.blocks.iter().position(|&d| d == 0) {
        return Err(PresolveError::EmptyBlock { block });
    }
    if problem.cost.len() != problem.blocks.len() {
        return Err(PresolveError::CostBlocks {
            expected: problem.blocks.len(),
            found: problem.cost.len(),
        });
    }
    let len = problem.num_coordinates();
    for row in problem.equalities.iter().chain(&problem.inequalities) {
        if !row.rhs.is_finite() {
            return Err(PresolveError::NonFinite);
        }
        for &(coordinate, v) in &row.terms {
            if coordinate >= len {
                return Err(PresolveError::Coordinate { coordinate, len });
            }
            if !v.is_finite() {
                return Err(PresolveError::NonFinite);
            }
        }
    }
    if problem.cost.iter().any(|c| c.iter().any(|v| !v.is_finite())) {
        return Err(PresolveError::NonFinite);
    }
    Ok(())
}

/// Rows that own a coordinate no other remaining row touches are linearly
/// independent of the rest; peel them off repeatedly and return what is left.
fn peel_private_rows(rows: &[LinearRow], ncols: usize) -> Vec<usize> {
    let mut count = vec![0usize; ncols];
    let mut by_col: Vec<Vec<usize>> = vec![Vec::new(); ncols];
    for (r, row) in rows.iter().enumerate() {
        let cut = 1e-12 * row.max_abs();
        for &(j, v) in &row.terms {
            if v.abs() > cut {
                count[j] += 1;
                by_col[j].push(r);
            }
        }
    }
    let mut alive = vec![true; rows.len()];
    let mut stack: Vec<usize> = (0..ncols).filter(|&j| count[j] == 1).collect();
    while let Some(j) = stack.pop() {
        if count[j] != 1 {
            continue;
        }
        let Some(&r) = by_col[j].iter().find(|&&r| alive[r]) else {
            continue;
        };
        alive[r] = false;
        let cut = 1e-12 * rows[r].max_abs();
        for &(k, v) in &rows[r].terms {
            if v.abs() > cut {
                count[k] -= 1;
                if count[k] == 1 {
                    stack.push(k);
                }
            }
        }
    }
    (0..rows.len()).filter(|&r| alive[r]).collect()
}

/// Modified Gram–Schmidt over the rows that survived peeling. Returns the
/// dependent rows, flagging those whose right-hand side is inconsistent.
fn dependent_rows(rows: &[LinearRow], core: &[usize]) -> Vec<(usize, bool)> {
    let mut cols: Vec<usize> = core.iter().flat_map(|&r| rows[r].terms.iter().map(|&(j, _)| j)).collect();
    cols.sort_unstable();
    cols.dedup();
    let local = |j: usize| cols.binary_search(&j).expect("column collected above");

    let mut basis: Vec<(Vec<f64>, f64)> = Vec::new();
    let mut out = Vec::new();
    for &r in core {
        let mut a = vec![0.0; cols.len()];
        for &(j, v) in &rows[r].terms {
            a[local(j)] += v;
        }
        let mut rhs = rows[r].rhs;
        let norm0 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm0 == 0.0 {
            out.push((r, rhs.abs() > DEPENDENCE_TOL));
            continue;
        }
        for _ in 0..2 {
            for (q, beta) in &basis {
                let c: f64 = a.iter().zip(q).map(|(x, y)| x * y).sum();
                for (x, y) in a.iter_mut().zip(q) {
                    *x -= c * y;
                }
                rhs -= c * beta;
            }
        }
        let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= DEPENDENCE_TOL * norm0 {
            let scale = 1.0 + rows[r].rhs.abs();
            out.push((r, rhs.abs() > 1e-7 * scale));
        } else {
            a.iter_mut().for_each(|x| *x /= norm);
            basis.push((a, rhs / norm));
        }
    }
    out
}

fn row_inf_norms(a: &Csr) -> Vec<f64> {
    (0..a.nrows)
        .map(|i| a.row(i).fold(0.0f64, |m, (_, v)| m.max(v.abs())))
        .collect()
}

fn col_inf_norms(a: &Csr) -> Vec<f64> {
    let mut out = vec![0.0f64; a.ncols];
    for (k, &j) in a.indices.iter().enumerate() {
        out[j] = out[j].max(a.values[k].abs());
    }
    out
}

fn clamp_norm(v: f64) -> f64 {
    if v < NORM_FLOOR {
        1.0
    } else {
        v.min(NORM_CEIL)
    }
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Drop redundant equality rows and equilibrate the stacked constraint
/// matrix. Dependent rows with an inconsistent right-hand side are kept, so
/// the solver sees (and reports) the infeasibility.
pub fn presolve(problem: &ConicSdp) -> Result<Presolved, PresolveError> {
    check(problem)?;
    let nv = problem.num_coordinates();

    let core = peel_private_rows(&problem.equalities, nv);
    let mut dropped = Vec::new();
    for (r, inconsistent) in dependent_rows(&problem.equalities, &core) {
        if inconsistent {
            warn!("presolve: equality row {r} is dependent but inconsistent; keeping it");
        } else {
            info!("presolve: dropped redundant equality row {r}");
            dropped.push(r);
        }
    }
    dropped.sort_unstable();
    let mut reduced = problem.clone();
    reduced.equalities = problem
        .equalities
        .iter()
        .enumerate()
        .filter(|(i, _)| dropped.binary_search(i).is_err())
        .map(|(_, r)| r.clone())
        .collect();

    let me = reduced.equalities.len();
    let mi = reduced.inequalities.len();
    let identity: Vec<Vec<(usize, f64)>> = (0..nv).map(|t| vec![(t, -1.0)]).collect();
    let stacked = Csr::from_rows(
        reduced
            .equalities
            .iter()
            .chain(&reduced.inequalities)
            .map(|r| r.terms.as_slice())
            .chain(identity.iter().map(|r| r.as_slice())),
        nv,
    );
    let rhs: Vec<f64> = reduced
        .equalities
        .iter()
        .chain(&reduced.inequalities)
        .map(|r| r.rhs)
        .chain(std::iter::repeat(0.0).take(nv))
        .collect();
    let cost = reduced.cost_vector();

    let offsets = reduced.offsets();
    let mut scaled = stacked.clone();
    let mut d = vec![1.0; nv];
    let mut e = vec![1.0; stacked.nrows];
    for _ in 0..RUIZ_PASSES {
        let cn: Vec<f64> = col_inf_norms(&scaled).into_iter().map(|v| clamp_norm(v.sqrt())).collect();
        let mut rn: Vec<f64> = row_inf_norms(&scaled).into_iter().map(|v| clamp_norm(v.sqrt())).collect();
        for b in 0..reduced.blocks.len() {
            let rows = me + mi + offsets[b]..me + mi + offsets[b + 1];
            let avg = rn[rows.clone()].iter().sum::<f64>() / rows.len() as f64;
            rn[rows].iter_mut().for_each(|v| *v = avg);
        }
        let inv_r: Vec<f64> = rn.iter().map(|v| 1.0 / v).collect();
        let inv_c: Vec<f64> = cn.iter().map(|v| 1.0 / v).collect();
        scaled.scale(&inv_r, &inv_c);
        d.iter_mut().zip(&inv_c).for_each(|(x, y)| *x *= y);
        e.iter_mut().zip(&inv_r).for_each(|(x, y)| *x *= y);
    }
    let b_scaled: Vec<f64> = rhs.iter().zip(&e).map(|(b, e)| b * e).collect();
    let c_scaled: Vec<f64> = cost.iter().zip(&d).map(|(c, d)| c * d).collect();
    let primal = 1.0 / norm2(&b_scaled).max(NORM_FLOOR);
    let dual = 1.0 / norm2(&c_scaled).max(NORM_FLOOR);

    let scaling = Scaling {
        columns: d,
        equality_rows: e[..me].to_vec(),
        inequality_rows: e[me..me + mi].to_vec(),
        block_rows: (0..reduced.blocks.len()).map(|b| e[me + mi + offsets[b]]).collect(),
        primal,
        dual,
    };
    Ok(Presolved {
        problem: reduced,
        dropped_equalities: dropped,
        scaling,
        stacked,
        scaled,
        rhs,
        cost,
        row_scale: e,
    })
}
