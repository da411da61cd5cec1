use nalgebra::DMatrix;

use crate::numerics::SymVec;

/// A sparse linear functional over the stacked svec coordinates together
/// with its right-hand side.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearRow {
    pub terms: Vec<(usize, f64)>,
    pub rhs: f64,
}

impl LinearRow {
    pub fn new(terms: Vec<(usize, f64)>, rhs: f64) -> Self {
        let mut row = Self { terms, rhs };
        row.normalize();
        row
    }

    /// Sort by coordinate, merge duplicates and drop exact zeros.
    pub fn normalize(&mut self) {
        self.terms.sort_by_key(|&(i, _)| i);
        let mut out: Vec<(usize, f64)> = Vec::with_capacity(self.terms.len());
        for &(i, v) in &self.terms {
            match out.last_mut() {
                Some((j, w)) if *j == i => *w += v,
                _ => out.push((i, v)),
            }
        }
        out.retain(|&(_, v)| v != 0.0);
        self.terms = out;
    }

    pub fn dot(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|&(i, v)| v * x[i]).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.terms.iter().fold(0.0f64, |a, &(_, v)| a.max(v.abs()))
    }
}

/// `minimize Σ_b ⟨C_b, V_b⟩` subject to equality rows `a·x = b`, inequality
/// rows `g·x <= h` and `V_b ⪰ 0`, where `x` stacks `svec(V_b)` block by block.
#[derive(Debug, Clone, PartialEq)]
pub struct ConicSdp {
    pub blocks: Vec<usize>,
    pub cost: Vec<DMatrix<f64>>,
    pub equalities: Vec<LinearRow>,
    pub inequalities: Vec<LinearRow>,
}

impl ConicSdp {
    /// Empty program over blocks of the given dimensions, zero cost.
    pub fn new(blocks: Vec<usize>) -> Self {
        let cost = blocks.iter().map(|&d| DMatrix::zeros(d, d)).collect();
        Self {
            blocks,
            cost,
            equalities: Vec::new(),
            inequalities: Vec::new(),
        }
    }

    /// Offset of each block's first coordinate; one extra trailing entry
    /// holds the total.
    pub fn offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.blocks.len() + 1);
        let mut acc = 0;
        out.push(0);
        for &d in &self.blocks {
            acc += SymVec::new(d).len();
            out.push(acc);
        }
        out
    }

    pub fn num_coordinates(&self) -> usize {
        self.blocks.iter().map(|&d| SymVec::new(d).len()).sum()
    }

    /// Global coordinate of entry `(i, j)` in block `b`.
    pub fn coordinate(&self, block: usize, i: usize, j: usize) -> usize {
        let off: usize = self.blocks[..block].iter().map(|&d| SymVec::new(d).len()).sum();
        off + SymVec::new(self.blocks[block]).index(i, j)
    }

    pub fn cost_vector(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.num_coordinates()];
        let offs = self.offsets();
        for (b, c) in self.cost.iter().enumerate() {
            SymVec::new(self.blocks[b]).svec_into(c, &mut out[offs[b]..offs[b + 1]]);
        }
        out
    }

    pub fn blocks_to_vector(&self, blocks: &[DMatrix<f64>]) -> Vec<f64> {
        let mut out = vec![0.0; self.num_coordinates()];
        let offs = self.offsets();
        for (b, m) in blocks.iter().enumerate() {
            SymVec::new(self.blocks[b]).svec_into(m, &mut out[offs[b]..offs[b + 1]]);
        }
        out
    }

    pub fn vector_to_blocks(&self, x: &[f64]) -> Vec<DMatrix<f64>> {
        let offs = self.offsets();
        self.blocks
            .iter()
            .enumerate()
            .map(|(b, &d)| SymVec::new(d).smat(&x[offs[b]..offs[b + 1]]))
            .collect()
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        self.cost_vector().iter().zip(x).map(|(c, v)| c * v).sum()
    }

    pub fn add_equality(&mut self, terms: Vec<(usize, f64)>, rhs: f64) {
        self.equalities.push(LinearRow::new(terms, rhs));
    }

    pub fn add_inequality(&mut self, terms: Vec<(usize, f64)>, rhs: f64) {
        self.inequalities.push(LinearRow::new(terms, rhs));
    }

    /// Row `⟨M, V_b⟩` written in svec coordinates.
    pub fn trace_terms(&self, block: usize, m: &DMatrix<f64>) -> Vec<(usize, f64)> {
        let d = self.blocks[block];
        let off = self.offsets()[block];
        SymVec::new(d)
            .svec(m)
            .into_iter()
            .enumerate()
            .filter(|&(_, v)| v != 0.0)
            .map(|(k, v)| (off + k, v))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_normalization_merges_duplicates() {
        let row = LinearRow::new(vec![(3, 1.0), (1, 2.0), (3, -1.0), (1, 0.5)], 0.0);
        assert_eq!(row.terms, vec![(1, 2.5)]);
    }

    #[test]
    fn trace_terms_match_trace_product() {
        let p = ConicSdp::new(vec![1, 3]);
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 5.0, 3.0, 5.0, 6.0]);
        let v = DMatrix::from_row_slice(3, 3, &[2.0, -1.0, 0.5, -1.0, 3.0, 0.0, 0.5, 0.0, 1.0]);
        let row = LinearRow::new(p.trace_terms(1, &m), 0.0);
        let x = p.blocks_to_vector(&[DMatrix::from_element(1, 1, 7.0), v.clone()]);
        let expect = crate::numerics::trace_product(&m, &v);
        assert!((row.dot(&x) - expect).abs() < 1e-12);
        assert_eq!(p.coordinate(1, 0, 0), 1);
        assert_eq!(p.offsets(), vec![0, 1, 7]);
    }
}
