use nalgebra::{DMatrix, DMatrixView};
use rayon::prelude::*;

use crate::blockmat::{BlockStack, SquareBlock};
use crate::error::{Result, SyncError};

/// Symmetric block observation `A` with its observation mask.
///
/// Only the blocks `A_ij` with `i < j` are stored, in ascending `(i, j)`
/// order; `A_ji` is implied as `A_ij^T`. Diagonal blocks are zero and never
/// observed.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockObservation {
    n: usize,
    d: usize,
    edges: Vec<(usize, usize)>,
    data: Vec<f64>,
    // per node: (neighbour, edge index), ascending neighbour
    adjacency: Vec<Vec<(usize, usize)>>,
}

impl BlockObservation {
    /// Builds an observation from upper-triangular edges `(i, j, A_ij)`.
    ///
    /// Edges may be given in any order and orientation; `(j, i, M)` is stored
    /// as `(i, j, M^T)`. Duplicate pairs are rejected.
    pub fn from_edges(n: usize, d: usize, edges: Vec<(usize, usize, SquareBlock)>) -> Result<Self> {
        if n < 2 || d == 0 {
            return Err(SyncError::InvalidArgument(format!(
                "observation needs n >= 2 and d >= 1 (got n={n}, d={d})"
            )));
        }
        let mut oriented = Vec::with_capacity(edges.len());
        for (i, j, m) in edges {
            if i >= n || j >= n || i == j {
                return Err(SyncError::InvalidArgument(format!(
                    "edge ({}, {}) is out of range or a self-loop",
                    i + 1,
                    j + 1
                )));
            }
            if m.nrows() != d || m.ncols() != d {
                return Err(SyncError::DimensionMismatch(format!(
                    "edge ({}, {}) block is {}x{}, expected {d}x{d}",
                    i + 1,
                    j + 1,
                    m.nrows(),
                    m.ncols()
                )));
            }
            if i < j {
                oriented.push((i, j, m));
            } else {
                oriented.push((j, i, m.transpose()));
            }
        }
        oriented.sort_by_key(|&(i, j, _)| (i, j));
        for w in oriented.windows(2) {
            if (w[0].0, w[0].1) == (w[1].0, w[1].1) {
                return Err(SyncError::DuplicateEdge {
                    i: w[0].0 + 1,
                    j: w[0].1 + 1,
                });
            }
        }
        let mut builder = ObservationBuilder::new(n, d);
        for (i, j, m) in &oriented {
            builder.push(*i, *j, m.as_slice());
        }
        Ok(builder.finish())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Observed unordered pairs `(i, j)`, `i < j`, ascending.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Fraction of the `n(n-1)/2` unordered pairs that are observed.
    pub fn observed_fraction(&self) -> f64 {
        let pairs = self.n * (self.n - 1) / 2;
        self.edges.len() as f64 / pairs as f64
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adjacency[i].len()
    }

    /// Neighbours of `i` with their edge indices, ascending.
    pub fn neighbours(&self, i: usize) -> &[(usize, usize)] {
        &self.adjacency[i]
    }

    pub fn mask(&self, i: usize, j: usize) -> bool {
        self.edge_index(i, j).is_some()
    }

    pub fn edge_index(&self, i: usize, j: usize) -> Option<usize> {
        if i >= self.n || j >= self.n || i == j {
            return None;
        }
        let adj = &self.adjacency[i];
        adj.binary_search_by_key(&j, |&(k, _)| k)
            .ok()
            .map(|pos| adj[pos].1)
    }

    /// Stored upper block `A_ij` (`i < j`) of edge `e`.
    pub fn edge_block(&self, e: usize) -> DMatrixView<'_, f64> {
        let dd = self.d * self.d;
        DMatrixView::from_slice(&self.data[e * dd..(e + 1) * dd], self.d, self.d)
    }

    /// `A_ij` for any ordered pair; zero when unobserved or on the diagonal.
    pub fn block(&self, i: usize, j: usize) -> SquareBlock {
        match self.edge_index(i, j) {
            Some(e) if i < j => self.edge_block(e).into_owned(),
            Some(e) => self.edge_block(e).transpose(),
            None => DMatrix::zeros(self.d, self.d),
        }
    }

    /// Raw column-major storage of the upper blocks, edge by edge.
    pub fn raw_blocks(&self) -> &[f64] {
        &self.data
    }

    /// `sum_{i<j observed} ||A_ij||_F^2`.
    pub fn upper_frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Dense `nd x nd` symmetric matrix with zero diagonal blocks.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let (n, d) = (self.n, self.d);
        let mut a = DMatrix::zeros(n * d, n * d);
        for (e, &(i, j)) in self.edges.iter().enumerate() {
            let b = self.edge_block(e);
            a.view_mut((i * d, j * d), (d, d)).copy_from(&b);
            a.view_mut((j * d, i * d), (d, d)).copy_from(&b.transpose());
        }
        a
    }

    /// Returns a copy where every observed block is replaced by `f(i, j, A_ij)`
    /// (`i < j`). The mask is unchanged.
    pub fn map_blocks<F>(&self, mut f: F) -> BlockObservation
    where
        F: FnMut(usize, usize, DMatrixView<'_, f64>) -> SquareBlock,
    {
        let mut out = self.clone();
        let dd = self.d * self.d;
        for (e, &(i, j)) in self.edges.iter().enumerate() {
            let m = f(i, j, self.edge_block(e));
            out.data[e * dd..(e + 1) * dd].copy_from_slice(m.as_slice());
        }
        out
    }

    /// Block product `B = A X`, i.e. `B_i = sum_{j observed} A_ij X_j`.
    ///
    /// Each output block sums its neighbours in ascending index order, so the
    /// serial and parallel paths give bit-identical results.
    pub fn apply(&self, x: &BlockStack, parallel: bool) -> Result<BlockStack> {
        if x.n() != self.n || x.d() != self.d {
            return Err(SyncError::DimensionMismatch(format!(
                "stack has {}x{} blocks, observation expects {}x{}",
                x.n(),
                x.d(),
                self.n,
                self.d
            )));
        }
        let mut out = BlockStack::zeros(self.n, self.d);
        let kernel = |(i, dst): (usize, &mut [f64])| self.accumulate_row(i, x.as_slice(), dst);
        let dd = self.d * self.d;
        if parallel {
            out.raw_mut().par_chunks_mut(dd).enumerate().for_each(kernel);
        } else {
            out.raw_mut().chunks_mut(dd).enumerate().for_each(kernel);
        }
        Ok(out)
    }

    fn accumulate_row(&self, i: usize, x: &[f64], dst: &mut [f64]) {
        let d = self.d;
        let dd = d * d;
        let s = d as isize;
        for &(j, e) in &self.adjacency[i] {
            let a = &self.data[e * dd..(e + 1) * dd];
            let xj = &x[j * dd..(j + 1) * dd];
            // stored block is A_min(i,j),max(i,j); transpose it when i > j
            let (rsa, csa) = if i < j { (1, s) } else { (s, 1) };
            // SAFETY: all three buffers hold d*d column-major values and
            // `dst` does not alias `a` or `xj`.
            unsafe {
                matrixmultiply::dgemm(
                    d,
                    d,
                    d,
                    1.0,
                    a.as_ptr(),
                    rsa,
                    csa,
                    xj.as_ptr(),
                    1,
                    s,
                    1.0,
                    dst.as_mut_ptr(),
                    1,
                    s,
                );
            }
        }
    }
}

/// Incremental construction in ascending `(i, j)` order.
pub(crate) struct ObservationBuilder {
    n: usize,
    d: usize,
    edges: Vec<(usize, usize)>,
    data: Vec<f64>,
}

impl ObservationBuilder {
    pub(crate) fn new(n: usize, d: usize) -> Self {
        ObservationBuilder {
            n,
            d,
            edges: Vec::new(),
            data: Vec::new(),
        }
    }

    /// Appends `A_ij` (column-major). Callers push pairs in ascending order.
    pub(crate) fn push(&mut self, i: usize, j: usize, block: &[f64]) {
        debug_assert!(i < j && j < self.n);
        debug_assert!(self.edges.last().is_none_or(|&last| last < (i, j)));
        self.edges.push((i, j));
        self.data.extend_from_slice(block);
    }

    pub(crate) fn finish(self) -> BlockObservation {
        let mut adjacency = vec![Vec::new(); self.n];
        for (e, &(i, j)) in self.edges.iter().enumerate() {
            adjacency[i].push((j, e));
            adjacency[j].push((i, e));
        }
        for adj in &mut adjacency {
            adj.sort_unstable();
        }
        BlockObservation {
            n: self.n,
            d: self.d,
            edges: self.edges,
            data: self.data,
            adjacency,
        }
    }
}
