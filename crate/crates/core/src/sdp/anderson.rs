//! Type-II Anderson acceleration for a fixed-point iteration `w ← T(w)`.

use nalgebra::{DMatrix, DVector};

pub(crate) struct Anderson {
    memory: usize,
    dw: Vec<Vec<f64>>,
    df: Vec<Vec<f64>>,
    /// Gram matrix of the stored `Δf` columns, kept in ring order.
    gram: DMatrix<f64>,
    next: usize,
    filled: usize,
    prev_w: Vec<f64>,
    prev_f: Vec<f64>,
    have_prev: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Anderson {
    pub fn new(memory: usize, len: usize) -> Self {
        Self {
            memory,
            dw: vec![vec![0.0; len]; memory],
            df: vec![vec![0.0; len]; memory],
            gram: DMatrix::zeros(memory, memory),
            next: 0,
            filled: 0,
            prev_w: vec![0.0; len],
            prev_f: vec![0.0; len],
            have_prev: false,
        }
    }

    pub fn reset(&mut self) {
        self.filled = 0;
        self.next = 0;
        self.have_prev = false;
    }

    /// Given the current point `w` and `t = T(w)`, overwrite `t` with the
    /// accelerated next point. Leaves `t` alone when there is no usable
    /// history or the least-squares system is degenerate.
    pub fn extrapolate(&mut self, w: &[f64], t: &mut [f64]) {
        let f: Vec<f64> = t.iter().zip(w).map(|(a, b)| a - b).collect();
        if self.have_prev {
            let slot = self.next;
            for i in 0..w.len() {
                self.dw[slot][i] = w[i] - self.prev_w[i];
                self.df[slot][i] = f[i] - self.prev_f[i];
            }
            self.filled = (self.filled + 1).min(self.memory);
            self.next = (self.next + 1) % self.memory;
            for j in 0..self.filled {
                let g = dot(&self.df[slot], &self.df[j]);
                self.gram[(slot, j)] = g;
                self.gram[(j, slot)] = g;
            }
        }
        self.prev_w.copy_from_slice(w);
        self.prev_f.copy_from_slice(&f);
        self.have_prev = true;
        if self.filled == 0 {
            return;
        }

        let k = self.filled;
        let mut g = self.gram.view((0, 0), (k, k)).into_owned();
        let scale = (0..k).map(|i| g[(i, i)]).fold(0.0f64, f64::max);
        if !(scale > 0.0) || !scale.is_finite() {
            return;
        }
        for i in 0..k {
            g[(i, i)] += 1e-10 * scale;
        }
        let rhs = DVector::from_fn(k, |j, _| dot(&self.df[j], &f));
        let Some(chol) = g.cholesky() else {
            return;
        };
        let gamma = chol.solve(&rhs);
        if gamma.iter().any(|x| !x.is_finite()) {
            return;
        }
        for j in 0..k {
            let c = gamma[j];
            let (dw, df) = (&self.dw[j], &self.df[j]);
            for i in 0..t.len() {
                t[i] -= c * (dw[i] + df[i]);
            }
        }
    }
}
