//! Compressed-row matrices and a banded Cholesky solver for the periodic
//! SPD systems `δ₀M + τA`.
//!
//! The periodic wrap couples node `0` with node `N−1`, so the natural
//! ordering has corner entries. Reordering the nodes as `0, N−1, 1, N−2, …`
//! turns the ring into a band of half-width at most `2k`, after which a plain
//! banded Cholesky factorization applies.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::SolverError;

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Structure from sorted, duplicate-free column lists per row; values zeroed.
    pub fn from_pattern(rows: &[Vec<usize>]) -> Self {
        let n = rows.len();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for r in rows {
            col_idx.extend_from_slice(r);
            row_ptr.push(col_idx.len());
        }
        let nnz = col_idx.len();
        CsrMatrix { n, row_ptr, col_idx, values: vec![0.0; nnz] }
    }

    pub fn from_dense(dense: &[Vec<f64>]) -> Self {
        let rows: Vec<Vec<usize>> = dense.iter().map(|r| (0..r.len()).filter(|&j| r[j] != 0.0).collect()).collect();
        let mut m = Self::from_pattern(&rows);
        for (i, r) in rows.iter().enumerate() {
            for (off, &j) in r.iter().enumerate() {
                m.values[m.row_ptr[i] + off] = dense[i][j];
            }
        }
        m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (self.row_ptr[i]..self.row_ptr[i + 1]).map(move |p| (self.col_idx[p], self.values[p]))
    }

    /// Storage offset of entry `(i, j)`, if structurally present.
    pub fn offset(&self, i: usize, j: usize) -> Option<usize> {
        let cols = &self.col_idx[self.row_ptr[i]..self.row_ptr[i + 1]];
        cols.binary_search(&j).ok().map(|p| self.row_ptr[i] + p)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.offset(i, j).map_or(0.0, |p| self.values[p])
    }

    pub fn mul_vec_into(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n);
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = self.row(i).map(|(j, v)| v * x[j]).sum();
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.mul_vec_into(x, &mut y);
        y
    }

    /// `a·self + b·other`; both must share one sparsity pattern.
    pub fn linear_combination(&self, a: f64, b: f64, other: &CsrMatrix) -> CsrMatrix {
        assert_eq!(self.col_idx, other.col_idx, "sparsity patterns differ");
        CsrMatrix {
            values: self.values.iter().zip(&other.values).map(|(x, y)| a * x + b * y).collect(),
            ..self.clone()
        }
    }

    pub fn scaled(&self, s: f64) -> CsrMatrix {
        CsrMatrix { values: self.values.iter().map(|v| s * v).collect(), ..self.clone() }
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.n]; self.n];
        for (i, row) in d.iter_mut().enumerate() {
            for (j, v) in self.row(i) {
                row[j] = v;
            }
        }
        d
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut m: f64 = 0.0;
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                m = m.max((v - self.get(j, i)).abs());
            }
        }
        m
    }

    /// Bitwise hash of structure and values.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.n.hash(&mut h);
        self.col_idx.hash(&mut h);
        for v in &self.values {
            v.to_bits().hash(&mut h);
        }
        h.finish()
    }
}

/// Banded Cholesky factor `P A Pᵀ = L Lᵀ` under the ring-unfolding permutation.
#[derive(Debug, Clone)]
pub struct BandedCholesky {
    n: usize,
    bandwidth: usize,
    /// new index → old index
    perm: Vec<usize>,
    /// old index → new index
    inv: Vec<usize>,
    /// row-major band storage: `l[i*(bw+1) + (j + bw - i)]` for `i-bw <= j <= i`
    l: Vec<f64>,
}

fn ring_unfolding(n: usize) -> Vec<usize> {
    (0..n).map(|m| if m % 2 == 0 { m / 2 } else { n - 1 - (m - 1) / 2 }).collect()
}

impl BandedCholesky {
    pub fn factor(a: &CsrMatrix) -> Result<Self, SolverError> {
        let n = a.n();
        let perm = ring_unfolding(n);
        let mut inv = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let mut bw = 0;
        for i in 0..n {
            for (j, _) in a.row(i) {
                bw = bw.max(inv[i].abs_diff(inv[j]));
            }
        }
        let w = bw + 1;
        let mut l = vec![0.0; n * w];
        for i in 0..n {
            let pi = inv[i];
            for (j, v) in a.row(i) {
                let pj = inv[j];
                if pj <= pi {
                    l[pi * w + (pj + bw - pi)] = v;
                }
            }
        }
        for i in 0..n {
            let j0 = i.saturating_sub(bw);
            for j in j0..=i {
                let mut s = l[i * w + (j + bw - i)];
                let k0 = j0.max(j.saturating_sub(bw));
                for k in k0..j {
                    s -= l[i * w + (k + bw - i)] * l[j * w + (k + bw - j)];
                }
                if j == i {
                    if !(s > 0.0) {
                        return Err(SolverError::NotPositiveDefinite { index: perm[i], pivot: s });
                    }
                    l[i * w + bw] = s.sqrt();
                } else {
                    l[i * w + (j + bw - i)] = s / l[j * w + bw];
                }
            }
        }
        Ok(BandedCholesky { n, bandwidth: bw, perm, inv, l })
    }

    pub fn bandwidth(&self) -> usize {
        self.bandwidth
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>, SolverError> {
        if b.len() != self.n {
            return Err(SolverError::Length { expected: self.n, found: b.len() });
        }
        let (n, bw, w) = (self.n, self.bandwidth, self.bandwidth + 1);
        let mut y: Vec<f64> = self.perm.iter().map(|&old| b[old]).collect();
        for i in 0..n {
            let mut s = y[i];
            for k in i.saturating_sub(bw)..i {
                s -= self.l[i * w + (k + bw - i)] * y[k];
            }
            y[i] = s / self.l[i * w + bw];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..(i + bw + 1).min(n) {
                s -= self.l[k * w + (i + bw - k)] * y[k];
            }
            y[i] = s / self.l[i * w + bw];
        }
        Ok((0..n).map(|old| y[self.inv[old]]).collect())
    }
}

/// Result of a checked solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveStats {
    pub relative_residual: f64,
    pub refinements: usize,
}

/// Factorization plus the original matrix, for residual checks and
/// iterative refinement.
#[derive(Debug, Clone)]
pub struct SpdSolver {
    matrix: CsrMatrix,
    factor: BandedCholesky,
    tolerance: f64,
    max_refinements: usize,
}

pub const DEFAULT_RESIDUAL_TOLERANCE: f64 = 1e-12;

impl SpdSolver {
    pub fn new(matrix: CsrMatrix, tolerance: f64) -> Result<Self, SolverError> {
        let factor = BandedCholesky::factor(&matrix)?;
        Ok(SpdSolver { matrix, factor, tolerance, max_refinements: 3 })
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.matrix
    }

    pub fn solve(&self, b: &[f64]) -> Result<(Vec<f64>, SolveStats), SolverError> {
        let bnorm = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut x = self.factor.solve(b)?;
        if bnorm == 0.0 {
            return Ok((x, SolveStats { relative_residual: 0.0, refinements: 0 }));
        }
        let mut refinements = 0;
        loop {
            let ax = self.matrix.mul_vec(&x);
            let r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
            let rel = r.iter().fold(0.0f64, |m, v| m.max(v.abs())) / bnorm;
            if !rel.is_finite() {
                return Err(SolverError::Residual { relative: rel, tolerance: self.tolerance });
            }
            if rel <= self.tolerance {
                return Ok((x, SolveStats { relative_residual: rel, refinements }));
            }
            if refinements == self.max_refinements {
                return Err(SolverError::Residual { relative: rel, tolerance: self.tolerance });
            }
            let dx = self.factor.solve(&r)?;
            for (xi, d) in x.iter_mut().zip(dx) {
                *xi += d;
            }
            refinements += 1;
        }
    }
}
