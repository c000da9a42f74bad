//! Sparse symmetric block linear systems solved by Cholesky
//! factorization.
//!
//! Blocks are accumulated in a `BTreeMap` so assembly order never
//! changes the matrix, then handed to faer's sparse LLT (which applies a
//! fill-reducing ordering internally). Built without rayon so repeated
//! solves are bitwise reproducible.

use faer::linalg::solvers::Solve;
use faer::sparse::{SparseColMat, Triplet};
use nalgebra::{SMatrix, SVector};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinSolveError {
    /// The matrix is not positive definite (or is numerically singular).
    #[error("sparse Cholesky factorization failed: system is not positive definite")]
    NotPositiveDefinite,
    /// The assembled triplets do not form a valid sparse matrix.
    #[error("invalid sparse system assembly")]
    InvalidAssembly,
}

/// Symmetric positive-definite system with square blocks of size `D`.
pub(crate) struct BlockSystem<const D: usize> {
    block_count: usize,
    blocks: BTreeMap<(usize, usize), SMatrix<f64, D, D>>,
    rhs: Vec<SVector<f64, D>>,
}

impl<const D: usize> BlockSystem<D> {
    pub fn new(block_count: usize) -> Self {
        BlockSystem {
            block_count,
            blocks: BTreeMap::new(),
            rhs: vec![SVector::zeros(); block_count],
        }
    }

    pub fn block_count(&self) -> usize {
        self.block_count
    }

    /// Accumulates `m` into block `(i, j)`.
    pub fn add_block(&mut self, i: usize, j: usize, m: &SMatrix<f64, D, D>) {
        debug_assert!(i < self.block_count && j < self.block_count);
        *self
            .blocks
            .entry((i, j))
            .or_insert_with(SMatrix::zeros) += m;
    }

    /// Accumulates `v` into the right-hand side block `i`.
    pub fn add_rhs(&mut self, i: usize, v: &SVector<f64, D>) {
        self.rhs[i] += v;
    }

    pub fn rhs_norm(&self) -> f64 {
        self.rhs.iter().map(|v| v.norm_squared()).sum::<f64>().sqrt()
    }

    #[cfg(test)]
    pub fn block_for_test(&self, i: usize, j: usize) -> Option<SMatrix<f64, D, D>> {
        self.blocks.get(&(i, j)).copied()
    }

    #[cfg(test)]
    pub fn rhs_for_test(&self, i: usize) -> SVector<f64, D> {
        self.rhs[i]
    }

    /// Solves `(A + damping·I) x = rhs`.
    pub fn solve(&self, damping: f64) -> Result<Vec<SVector<f64, D>>, LinSolveError> {
        let dim = self.block_count * D;
        if dim == 0 {
            return Ok(Vec::new());
        }

        let mut triplets: Vec<Triplet<usize, usize, f64>> =
            Vec::with_capacity(self.blocks.len() * D * D + dim);
        for (&(bi, bj), m) in &self.blocks {
            for r in 0..D {
                for c in 0..D {
                    let v = m[(r, c)];
                    if v != 0.0 {
                        triplets.push(Triplet::new(bi * D + r, bj * D + c, v));
                    }
                }
            }
        }
        if damping != 0.0 {
            for k in 0..dim {
                triplets.push(Triplet::new(k, k, damping));
            }
        }

        let matrix = SparseColMat::try_new_from_triplets(dim, dim, &triplets)
            .map_err(|_| LinSolveError::InvalidAssembly)?;
        let llt = matrix
            .sp_cholesky(faer::Side::Lower)
            .map_err(|_| LinSolveError::NotPositiveDefinite)?;

        let rhs = faer::Mat::from_fn(dim, 1, |r, _| self.rhs[r / D][r % D]);
        let x = llt.solve(&rhs);

        let mut out = vec![SVector::<f64, D>::zeros(); self.block_count];
        for (bi, block) in out.iter_mut().enumerate() {
            for r in 0..D {
                block[r] = x[(bi * D + r, 0)];
            }
        }
        Ok(out)
    }
}
