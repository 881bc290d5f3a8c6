//! Dense block-matrix kernel.
//!
//! A [`BlockStack`] is an `nd x d` matrix viewed as `n` stacked `d x d`
//! blocks. Blocks are stored contiguously, each in column-major order, so a
//! block can be borrowed as a nalgebra view without copying.

use nalgebra::{DMatrix, DMatrixView, DMatrixViewMut};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SyncError};

/// A dense `d x d` real block.
pub type SquareBlock = DMatrix<f64>;

/// Default tolerance for orthogonality assertions.
pub const TOL_ORTH: f64 = 1e-10;

/// Relative threshold below which a block is treated as singular.
pub const SINGULAR_RTOL: f64 = 1e-12;

/// How a matrix sign was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignMethod {
    ExactSvd,
    NewtonSchulz(usize),
}

#[derive(Debug, Clone)]
pub struct SignResult {
    pub value: SquareBlock,
    /// Smallest singular value of the input matrix.
    pub min_singular: f64,
    pub method: SignMethod,
}

/// `sgn(a) = U V^T` from the SVD `a = U S V^T`.
pub fn matrix_sign_svd(a: &SquareBlock) -> Result<SignResult> {
    check_square(a)?;
    check_finite(a)?;
    let svd = a.clone().svd(true, true);
    let (mut smin, mut smax) = (f64::INFINITY, 0.0f64);
    for &s in svd.singular_values.iter() {
        smin = smin.min(s);
        smax = smax.max(s);
    }
    if !(smax > 0.0) || smin <= SINGULAR_RTOL * smax {
        return Err(SyncError::SingularInput {
            block: None,
            sigma_min: smin,
            sigma_max: smax,
        });
    }
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(SyncError::EigSolverFailure("SVD did not return factors".into())),
    };
    Ok(SignResult {
        value: u * v_t,
        min_singular: smin,
        method: SignMethod::ExactSvd,
    })
}

/// Runs `t_s` Newton-Schulz steps `S <- S (3I - S^T S) / 2` from `S_0 = a`.
///
/// No pre-scaling is applied. The iteration only converges when
/// `||I - a^T a||_2 < 1`; a Frobenius norm above `10 sqrt(d)` is reported as
/// divergence.
pub fn newton_schulz(a: &SquareBlock, t_s: usize) -> Result<SquareBlock> {
    check_square(a)?;
    let d = a.nrows();
    let limit = 10.0 * (d as f64).sqrt();
    let mut s = a.clone();
    let mut gram = DMatrix::zeros(d, d);
    let mut next = DMatrix::zeros(d, d);
    for step in 0..t_s {
        // gram = 3I - S^T S
        gram.gemm_tr(-1.0, &s, &s, 0.0);
        for k in 0..d {
            gram[(k, k)] += 3.0;
        }
        next.gemm(0.5, &s, &gram, 0.0);
        std::mem::swap(&mut s, &mut next);
        let norm = s.norm();
        if !norm.is_finite() || norm > limit {
            return Err(SyncError::DivergenceDetected {
                block: None,
                step: step + 1,
                norm,
            });
        }
    }
    Ok(s)
}

/// Tangent-space projection `(g - x g^T x) / 2` at `x`.
///
/// Orthogonality of `x` is not enforced; off the manifold this acts as a
/// pseudo projection.
pub fn tangent_project(x: &SquareBlock, g: &SquareBlock) -> SquareBlock {
    let mut out = g.clone();
    let xg_t = x * g.transpose();
    out.gemm(-1.0, &xg_t, x, 1.0);
    out *= 0.5;
    out
}

/// Sum of singular values.
pub fn nuclear_norm(a: &SquareBlock) -> f64 {
    a.singular_values().iter().sum()
}

/// Largest singular value.
pub fn spectral_norm(a: &SquareBlock) -> f64 {
    a.singular_values().iter().fold(0.0f64, |m, &s| m.max(s))
}

/// `||I - a^T a||_2`, computed from the eigenvalues of the symmetric residual.
pub fn orthogonality_defect(a: &SquareBlock) -> f64 {
    let d = a.ncols();
    let mut r = DMatrix::<f64>::identity(d, d);
    r.gemm_tr(-1.0, a, a, 1.0);
    // symmetrize against rounding before the symmetric eigensolver
    let r = (&r + r.transpose()) * 0.5;
    r.symmetric_eigenvalues()
        .iter()
        .fold(0.0f64, |m, &e| m.max(e.abs()))
}

fn check_square(a: &SquareBlock) -> Result<()> {
    if a.nrows() != a.ncols() || a.nrows() == 0 {
        return Err(SyncError::DimensionMismatch(format!(
            "expected a non-empty square block, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    Ok(())
}

fn check_finite(a: &SquareBlock) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(SyncError::InvalidArgument("block has non-finite entries".into()))
    }
}

/// `n` stacked `d x d` blocks.
#[derive(Debug, Clone)]
pub struct BlockStack {
    n: usize,
    d: usize,
    data: Vec<f64>,
    orthogonal: bool,
}

// the orthogonality flag is a cache and does not take part in equality
impl PartialEq for BlockStack {
    fn eq(&self, other: &Self) -> bool {
        self.n == other.n && self.d == other.d && self.data == other.data
    }
}

impl BlockStack {
    pub fn zeros(n: usize, d: usize) -> Self {
        BlockStack {
            n,
            d,
            data: vec![0.0; n * d * d],
            orthogonal: false,
        }
    }

    /// Stack of `n` identity blocks.
    pub fn identity(n: usize, d: usize) -> Self {
        let mut s = Self::zeros(n, d);
        for i in 0..n {
            s.block_mut(i).fill_with_identity();
        }
        s.orthogonal = true;
        s
    }

    pub fn from_blocks(blocks: &[SquareBlock]) -> Result<Self> {
        let d = blocks.first().map(|b| b.nrows()).unwrap_or(0);
        if d == 0 {
            return Err(SyncError::DimensionMismatch("empty block stack".into()));
        }
        let mut data = Vec::with_capacity(blocks.len() * d * d);
        for (i, b) in blocks.iter().enumerate() {
            if b.nrows() != d || b.ncols() != d {
                return Err(SyncError::DimensionMismatch(format!(
                    "block {} is {}x{}, expected {d}x{d}",
                    i + 1,
                    b.nrows(),
                    b.ncols()
                )));
            }
            data.extend_from_slice(b.as_slice());
        }
        Ok(BlockStack {
            n: blocks.len(),
            d,
            data,
            orthogonal: false,
        })
    }

    /// Builds a stack from an `nd x d` matrix.
    pub fn from_matrix(m: &DMatrix<f64>) -> Result<Self> {
        let d = m.ncols();
        if d == 0 || m.nrows() % d != 0 {
            return Err(SyncError::DimensionMismatch(format!(
                "{}x{} is not an nd x d stack",
                m.nrows(),
                d
            )));
        }
        let n = m.nrows() / d;
        let mut s = Self::zeros(n, d);
        for i in 0..n {
            s.block_mut(i).copy_from(&m.rows(i * d, d));
        }
        Ok(s)
    }

    /// Builds a stack from raw column-major block storage.
    pub fn from_raw(n: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * d * d {
            return Err(SyncError::DimensionMismatch(format!(
                "raw stack has {} values, expected {}",
                data.len(),
                n * d * d
            )));
        }
        Ok(BlockStack {
            n,
            d,
            data,
            orthogonal: false,
        })
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        let d = self.d;
        let mut m = DMatrix::zeros(self.n * d, d);
        for i in 0..self.n {
            m.rows_mut(i * d, d).copy_from(&self.block(i));
        }
        m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Set only by exact-sign constructors; cleared by any mutable access.
    pub fn is_flagged_orthogonal(&self) -> bool {
        self.orthogonal
    }

    pub(crate) fn set_orthogonal_flag(&mut self, flag: bool) {
        self.orthogonal = flag;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn block(&self, i: usize) -> DMatrixView<'_, f64> {
        let dd = self.d * self.d;
        DMatrixView::from_slice(&self.data[i * dd..(i + 1) * dd], self.d, self.d)
    }

    pub fn block_mut(&mut self, i: usize) -> DMatrixViewMut<'_, f64> {
        self.orthogonal = false;
        let dd = self.d * self.d;
        DMatrixViewMut::from_slice(&mut self.data[i * dd..(i + 1) * dd], self.d, self.d)
    }

    pub fn block_owned(&self, i: usize) -> SquareBlock {
        self.block(i).into_owned()
    }

    pub fn blocks(&self) -> impl Iterator<Item = DMatrixView<'_, f64>> + '_ {
        (0..self.n).map(move |i| self.block(i))
    }

    /// Raw column-major storage, for block maps over `chunks_mut(d * d)`.
    pub(crate) fn raw_mut(&mut self) -> &mut [f64] {
        self.orthogonal = false;
        &mut self.data
    }

    /// `X Q`: every block multiplied on the right by `q`.
    pub fn right_mul(&self, q: &SquareBlock) -> Self {
        let mut out = Self::zeros(self.n, self.d);
        for i in 0..self.n {
            out.block_mut(i).gemm(1.0, &self.block(i), q, 0.0);
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Frobenius norm of the difference of two equally shaped stacks.
    pub fn distance(&self, other: &BlockStack) -> Result<f64> {
        check_same_shape(self, other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }

    /// Largest per-block `||I - B^T B||_2`.
    pub fn max_orthogonality_defect(&self) -> f64 {
        self.blocks()
            .map(|b| orthogonality_defect(&b.into_owned()))
            .fold(0.0, f64::max)
    }

    /// True when every block satisfies `||B^T B - I||_F <= tol`.
    pub fn is_orthogonal(&self, tol: f64) -> bool {
        let d = self.d;
        self.blocks().all(|b| {
            let mut r = DMatrix::<f64>::identity(d, d);
            r.gemm_tr(1.0, &b, &b, -1.0);
            r.norm() <= tol
        })
    }

    /// Blockwise exact matrix sign. Errors carry the offending block index.
    pub fn sign_exact(&self) -> Result<BlockStack> {
        let mut out = Self::zeros(self.n, self.d);
        for i in 0..self.n {
            let s = matrix_sign_svd(&self.block_owned(i)).map_err(|e| e.at_block(i))?;
            out.block_mut(i).copy_from(&s.value);
        }
        out.orthogonal = true;
        Ok(out)
    }
}

pub(crate) fn check_same_shape(a: &BlockStack, b: &BlockStack) -> Result<()> {
    if a.n != b.n || a.d != b.d {
        return Err(SyncError::DimensionMismatch(format!(
            "stacks are {}x{} and {}x{} blocks",
            a.n, a.d, b.n, b.d
        )));
    }
    Ok(())
}

/// `Y^T X = sum_i Y_i^T X_i`, summed in ascending block order.
pub fn stack_gram(y: &BlockStack, x: &BlockStack) -> Result<SquareBlock> {
    check_same_shape(y, x)?;
    let mut acc = DMatrix::zeros(x.d, x.d);
    for i in 0..x.n {
        acc.gemm_tr(1.0, &y.block(i), &x.block(i), 1.0);
    }
    Ok(acc)
}

/// The orthogonal `Q` minimizing `||X - Y Q||_F`, i.e. `sgn(Y^T X)`.
pub fn optimal_rotation(y: &BlockStack, x: &BlockStack) -> Result<SignResult> {
    matrix_sign_svd(&stack_gram(y, x)?)
}
