//! Cholesky factorization of symmetric positive definite band matrices.
//!
//! The finite-horizon programs couple only neighbouring blocks, so the
//! normal matrix of the solver is banded and this keeps the factorization
//! linear in the horizon.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BandedError {
    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },
}

/// Lower band storage: entry `(i, j)` with `i - bandwidth <= j <= i` lives at
/// `data[i * (bandwidth + 1) + (i - j)]`.
#[derive(Debug, Clone)]
pub struct BandedCholesky {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl BandedCholesky {
    /// Zero matrix of order `n` with the given half-bandwidth, ready for
    /// [`BandedCholesky::add`] and then [`BandedCholesky::factor`].
    pub fn zeros(n: usize, bandwidth: usize) -> Self {
        let bw = bandwidth.min(n.saturating_sub(1));
        Self {
            n,
            bw,
            data: vec![0.0; n * (bw + 1)],
        }
    }

    pub fn order(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bw
    }

    /// Add `v` to entry `(i, j)` of the (symmetric) matrix, `|i - j| <= bw`.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        debug_assert!(i - j <= self.bw);
        self.data[i * (self.bw + 1) + (i - j)] += v;
    }

    fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * (self.bw + 1) + (i - j)]
    }

    /// In-place `A = L Lᵀ`.
    pub fn factor(mut self) -> Result<Self, BandedError> {
        let w = self.bw + 1;
        for j in 0..self.n {
            let lo = j.saturating_sub(self.bw);
            let mut d = self.at(j, j);
            for k in lo..j {
                let l = self.at(j, k);
                d -= l * l;
            }
            if !(d > 0.0) {
                return Err(BandedError::NotPositiveDefinite { pivot: j, value: d });
            }
            let d = d.sqrt();
            self.data[j * w] = d;
            let hi = (j + self.bw).min(self.n - 1);
            for i in j + 1..=hi {
                let lo_i = i.saturating_sub(self.bw).max(lo);
                let mut s = self.at(i, j);
                for k in lo_i..j {
                    s -= self.at(i, k) * self.at(j, k);
                }
                self.data[i * w + (i - j)] = s / d;
            }
        }
        Ok(self)
    }

    /// Solve `L Lᵀ x = b` in place (after [`BandedCholesky::factor`]).
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let w = self.bw + 1;
        for i in 0..self.n {
            let lo = i.saturating_sub(self.bw);
            let row = &self.data[i * w..(i + 1) * w];
            let mut s = b[i];
            for k in lo..i {
                s -= row[i - k] * b[k];
            }
            b[i] = s / row[0];
        }
        for i in (0..self.n).rev() {
            let hi = (i + self.bw).min(self.n.saturating_sub(1));
            let mut s = b[i];
            for k in i + 1..=hi {
                s -= self.data[k * w + (k - i)] * b[k];
            }
            b[i] = s / self.data[i * w];
        }
    }
}
