//! Dense symmetric-matrix primitives.
//!
//! The eigensolver is the classic two-phase method: Householder reduction to
//! tridiagonal form, then implicit QL iterations with Wilkinson-style shifts.
//! Everything else here (PSD projection, pseudoinverse, square-root factors)
//! is built on top of it.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::tolerances;

const SQRT_2: f64 = std::f64::consts::SQRT_2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },
    #[error("QL iteration did not converge after {iterations} iterations (off-diagonal residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
}

/// Eigendecomposition `S = Q diag(values) Qᵀ` with eigenvalues ascending.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

impl SymEigen {
    /// Rebuild `Q f(Λ) Qᵀ` for an elementwise map on the eigenvalues.
    pub fn recompose(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let d = self.values.len();
        let mut scaled = self.vectors.clone();
        for j in 0..d {
            let s = f(self.values[j]);
            scaled.column_mut(j).scale_mut(s);
        }
        let mut out = &scaled * self.vectors.transpose();
        symmetrize_in_place(&mut out);
        out
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Largest absolute entry of `M - Mᵀ`.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in 0..i {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

/// Accepts `m` when `max|M - Mᵀ| <= tol·(1 + max|M|)`.
pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    m.is_square() && asymmetry(m) <= tol * (1.0 + max_abs(m))
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    symmetrize_in_place(&mut out);
    out
}

pub fn symmetrize_in_place(m: &mut DMatrix<f64>) {
    let d = m.nrows();
    for i in 0..d {
        for j in 0..i {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Symmetric eigendecomposition, eigenvalues ascending.
pub fn sym_eig(s: &DMatrix<f64>) -> Result<SymEigen, NumericsError> {
    if !s.is_square() {
        return Err(NumericsError::NotSquare {
            rows: s.nrows(),
            cols: s.ncols(),
        });
    }
    if !is_symmetric(s, tolerances::SYMMETRY) {
        return Err(NumericsError::NotSymmetric {
            asymmetry: asymmetry(s),
        });
    }
    let d = s.nrows();
    if d == 0 {
        return Ok(SymEigen {
            values: DVector::zeros(0),
            vectors: DMatrix::zeros(0, 0),
        });
    }
    let mut v = symmetrize(s);
    let mut diag = vec![0.0; d];
    let mut off = vec![0.0; d];
    tridiagonalize(&mut v, &mut diag, &mut off);
    ql_implicit(&mut v, &mut diag, &mut off)?;
    Ok(SymEigen {
        values: DVector::from_vec(diag),
        vectors: v,
    })
}

/// Householder reduction of the symmetric matrix held in `v` to tridiagonal
/// form. On exit `v` holds the accumulated orthogonal transform, `diag` the
/// diagonal and `off[1..]` the subdiagonal.
fn tridiagonalize(v: &mut DMatrix<f64>, diag: &mut [f64], off: &mut [f64]) {
    let n = diag.len();
    for j in 0..n {
        diag[j] = v[(n - 1, j)];
    }

    for i in (1..n).rev() {
        let mut scale = 0.0;
        let mut h = 0.0;
        for k in 0..i {
            scale += diag[k].abs();
        }
        if scale == 0.0 {
            off[i] = diag[i - 1];
            for j in 0..i {
                diag[j] = v[(i - 1, j)];
                v[(i, j)] = 0.0;
                v[(j, i)] = 0.0;
            }
        } else {
            for k in 0..i {
                diag[k] /= scale;
                h += diag[k] * diag[k];
            }
            let mut f = diag[i - 1];
            let mut g = h.sqrt();
            if f > 0.0 {
                g = -g;
            }
            off[i] = scale * g;
            h -= f * g;
            diag[i - 1] = f - g;
            for item in off.iter_mut().take(i) {
                *item = 0.0;
            }

            for j in 0..i {
                f = diag[j];
                v[(j, i)] = f;
                g = off[j] + v[(j, j)] * f;
                for k in (j + 1)..i {
                    g += v[(k, j)] * diag[k];
                    off[k] += v[(k, j)] * f;
                }
                off[j] = g;
            }
            f = 0.0;
            for j in 0..i {
                off[j] /= h;
                f += off[j] * diag[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                off[j] -= hh * diag[j];
            }
            for j in 0..i {
                f = diag[j];
                g = off[j];
                for k in j..i {
                    v[(k, j)] -= f * off[k] + g * diag[k];
                }
                diag[j] = v[(i - 1, j)];
                v[(i, j)] = 0.0;
            }
        }
        diag[i] = h;
    }

    // Accumulate transformations.
    for i in 0..n.saturating_sub(1) {
        v[(n - 1, i)] = v[(i, i)];
        v[(i, i)] = 1.0;
        let h = diag[i + 1];
        if h != 0.0 {
            for k in 0..=i {
                diag[k] = v[(k, i + 1)] / h;
            }
            for j in 0..=i {
                let mut g = 0.0;
                for k in 0..=i {
                    g += v[(k, i + 1)] * v[(k, j)];
                }
                for k in 0..=i {
                    v[(k, j)] -= g * diag[k];
                }
            }
        }
        for k in 0..=i {
            v[(k, i + 1)] = 0.0;
        }
    }
    for j in 0..n {
        diag[j] = v[(n - 1, j)];
        v[(n - 1, j)] = 0.0;
    }
    v[(n - 1, n - 1)] = 1.0;
    off[0] = 0.0;
}

/// Implicit QL on the tridiagonal (diag, off), accumulating into `v`.
/// Sorts eigenpairs ascending on exit.
fn ql_implicit(v: &mut DMatrix<f64>, diag: &mut [f64], off: &mut [f64]) -> Result<(), NumericsError> {
    let n = diag.len();
    let cap = 30 * n.max(1);
    let mut total = 0usize;
    for i in 1..n {
        off[i - 1] = off[i];
    }
    off[n - 1] = 0.0;

    let mut f = 0.0;
    let mut tst1 = 0.0f64;
    let eps = f64::EPSILON;
    for l in 0..n {
        tst1 = tst1.max(diag[l].abs() + off[l].abs());
        let mut m = l;
        while m < n {
            if off[m].abs() <= eps * tst1 {
                break;
            }
            m += 1;
        }
        // off[n-1] is zero, so m < n always holds here.
        let m = m.min(n - 1);

        if m > l {
            let mut iter = 0usize;
            loop {
                iter += 1;
                total += 1;
                if iter > cap {
                    return Err(NumericsError::NoConvergence {
                        iterations: total,
                        residual: off[l].abs(),
                    });
                }
                let mut g = diag[l];
                let mut p = (diag[l + 1] - g) / (2.0 * off[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                diag[l] = off[l] / (p + r);
                diag[l + 1] = off[l] * (p + r);
                let dl1 = diag[l + 1];
                let mut h = g - diag[l];
                for item in diag.iter_mut().take(n).skip(l + 2) {
                    *item -= h;
                }
                f += h;

                p = diag[m];
                let mut c = 1.0;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = off[l + 1];
                let mut s = 0.0;
                let mut s2 = 0.0;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    g = c * off[i];
                    h = c * p;
                    r = p.hypot(off[i]);
                    off[i + 1] = s * r;
                    s = off[i] / r;
                    c = p / r;
                    p = c * diag[i] - s * g;
                    diag[i + 1] = h + s * (c * g + s * diag[i]);
                    for k in 0..n {
                        h = v[(k, i + 1)];
                        v[(k, i + 1)] = s * v[(k, i)] + c * h;
                        v[(k, i)] = c * v[(k, i)] - s * h;
                    }
                }
                p = -s * s2 * c3 * el1 * off[l] / dl1;
                off[l] = s * p;
                diag[l] = c * p;
                if off[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        diag[l] += f;
        off[l] = 0.0;
    }

    // Selection sort, ascending.
    for i in 0..n.saturating_sub(1) {
        let mut k = i;
        let mut p = diag[i];
        for (j, &dj) in diag.iter().enumerate().skip(i + 1) {
            if dj < p {
                k = j;
                p = dj;
            }
        }
        if k != i {
            diag[k] = diag[i];
            diag[i] = p;
            v.swap_columns(i, k);
        }
    }
    Ok(())
}

/// Nearest PSD matrix in Frobenius norm: negative eigenvalues clamped to zero.
pub fn project_psd(s: &DMatrix<f64>) -> Result<DMatrix<f64>, NumericsError> {
    let eig = sym_eig(s)?;
    if eig.min() >= 0.0 {
        return Ok(symmetrize(s));
    }
    Ok(eig.recompose(|l| l.max(0.0)))
}

/// Moore–Penrose pseudoinverse of a symmetric PSD matrix. Eigenvalues below
/// `rank_tol · λ_max` are treated as zero.
pub fn pinv(s: &DMatrix<f64>, rank_tol: f64) -> Result<DMatrix<f64>, NumericsError> {
    let eig = sym_eig(s)?;
    let lmax = eig.values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if lmax == 0.0 {
        return Ok(DMatrix::zeros(s.nrows(), s.ncols()));
    }
    let cut = rank_tol * lmax;
    Ok(eig.recompose(|l| if l > cut { 1.0 / l } else { 0.0 }))
}

/// Factor `L` with `L Lᵀ = S` for a PSD `S`, via the eigendecomposition.
/// Eigenvalues in `[-clamp, 0)` are treated as zero; a more negative one is
/// reported through `Err` with that eigenvalue.
pub fn psd_sqrt_factor(s: &DMatrix<f64>, clamp: f64) -> Result<DMatrix<f64>, PsdFactorError> {
    let eig = sym_eig(s).map_err(PsdFactorError::Numerics)?;
    let lmin = eig.min();
    let scale = 1.0 + eig.values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if lmin < -clamp * scale {
        return Err(PsdFactorError::Indefinite { min_eigenvalue: lmin });
    }
    let d = s.nrows();
    let mut l = eig.vectors.clone();
    for j in 0..d {
        let lam = eig.values[j].max(0.0);
        l.column_mut(j).scale_mut(lam.sqrt());
    }
    Ok(l)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PsdFactorError {
    #[error(transparent)]
    Numerics(NumericsError),
    #[error("matrix is indefinite (min eigenvalue {min_eigenvalue:e})")]
    Indefinite { min_eigenvalue: f64 },
}

/// Coordinates of the scaled symmetric vectorization of a `d×d` matrix:
/// lower triangle, row by row, off-diagonal entries weighted by √2 so that
/// `⟨svec A, svec B⟩ = tr(AB)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SymVec {
    pub dim: usize,
}

impl SymVec {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }

    pub fn len(&self) -> usize {
        self.dim * (self.dim + 1) / 2
    }

    pub fn is_empty(&self) -> bool {
        self.dim == 0
    }

    /// Position of entry `(i, j)` (either triangle) in the vector.
    pub fn index(&self, i: usize, j: usize) -> usize {
        let (r, c) = if i >= j { (i, j) } else { (j, i) };
        r * (r + 1) / 2 + c
    }

    /// Inverse of [`SymVec::index`], returning `(i, j)` with `i >= j`.
    pub fn entry(&self, k: usize) -> (usize, usize) {
        let mut r = 0;
        while (r + 1) * (r + 2) / 2 <= k {
            r += 1;
        }
        (r, k - r * (r + 1) / 2)
    }

    pub fn weight(i: usize, j: usize) -> f64 {
        if i == j {
            1.0
        } else {
            SQRT_2
        }
    }

    pub fn svec_into(&self, m: &DMatrix<f64>, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.len());
        let mut k = 0;
        for i in 0..self.dim {
            for j in 0..=i {
                out[k] = if i == j {
                    m[(i, i)]
                } else {
                    0.5 * (m[(i, j)] + m[(j, i)]) * SQRT_2
                };
                k += 1;
            }
        }
    }

    pub fn svec(&self, m: &DMatrix<f64>) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.svec_into(m, &mut out);
        out
    }

    pub fn smat(&self, v: &[f64]) -> DMatrix<f64> {
        debug_assert_eq!(v.len(), self.len());
        let mut m = DMatrix::zeros(self.dim, self.dim);
        let mut k = 0;
        for i in 0..self.dim {
            for j in 0..=i {
                if i == j {
                    m[(i, i)] = v[k];
                } else {
                    let x = v[k] / SQRT_2;
                    m[(i, j)] = x;
                    m[(j, i)] = x;
                }
                k += 1;
            }
        }
        m
    }
}

pub fn trace_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.component_mul(&b.transpose()).sum()
}
