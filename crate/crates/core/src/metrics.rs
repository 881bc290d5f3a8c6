//! Evaluation quantities: distance up to a global rotation, relative error,
//! MSE and per-node residuals.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::blockmat::{
    check_same_shape, nuclear_norm, optimal_rotation, stack_gram, BlockStack, SquareBlock,
};
use crate::error::{Result, SyncError};

/// Full evaluation of an estimate against a reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub d_f: f64,
    pub rel_err: f64,
    pub mse: f64,
    /// Per-node unsquared residuals `||Xhat_i - X_i Q||_F`.
    pub residuals: Vec<f64>,
    /// Aligning rotation, column-major `d x d`.
    pub q_align: Vec<f64>,
}

/// An orthogonal maximizer of `tr(Q^T m)`: `U V^T` from any SVD of `m`.
///
/// Unlike [`crate::blockmat::matrix_sign_svd`] this accepts singular input,
/// where the maximizer is not unique.
pub(crate) fn polar_factor(m: &SquareBlock) -> SquareBlock {
    let svd = m.clone().svd(true, true);
    match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => u * v_t,
        _ => DMatrix::identity(m.nrows(), m.ncols()),
    }
}

/// `d_F(X, Y) = min_Q ||X - Y Q||_F` with the minimizing `Q = sgn(Y^T X)`.
///
/// When `Y^T X` is singular the minimizer is not unique; the distance is then
/// taken from the nuclear-norm identity
/// `||X||^2 + ||Y||^2 - 2 ||Y^T X||_*` and no rotation is returned.
pub fn dist_frob(x: &BlockStack, y: &BlockStack) -> Result<(f64, Option<SquareBlock>)> {
    check_same_shape(x, y)?;
    match optimal_rotation(y, x) {
        Ok(q) => {
            let dist = x.distance(&y.right_mul(&q.value))?;
            Ok((dist, Some(q.value)))
        }
        Err(SyncError::SingularInput { .. }) => {
            let gram = stack_gram(y, x)?;
            let sq = x.frobenius_norm().powi(2) + y.frobenius_norm().powi(2)
                - 2.0 * nuclear_norm(&gram);
            Ok((sq.max(0.0).sqrt(), None))
        }
        Err(e) => Err(e),
    }
}

/// `||Z Z^T - X X^T||_F / ||Z Z^T||_F` using `d x d` Gram matrices only.
///
/// With `U = Z Q` for the aligning rotation `Q` and `E = X - U`,
/// `X X^T - Z Z^T = U E^T + E U^T + E E^T`, whose squared norm is
/// `2<U^T U, E^T E> + ||E^T E||^2 + 2 tr(C^2) + 4 tr(C E^T E)` with
/// `C = U^T E`. Every term is of the size of the result, so small errors do
/// not drown in cancellation.
pub fn rel_error(x: &BlockStack, z: &BlockStack) -> Result<f64> {
    check_same_shape(x, z)?;
    let q = polar_factor(&stack_gram(z, x)?);
    let u = z.right_mul(&q);
    let mut e = x.clone();
    for i in 0..x.n() {
        let mut b = e.block_mut(i);
        b -= u.block(i);
    }
    let g_u = stack_gram(&u, &u)?;
    let g_e = stack_gram(&e, &e)?;
    let c = stack_gram(&u, &e)?;
    let num_sq = 2.0 * g_u.dot(&g_e)
        + g_e.norm_squared()
        + 2.0 * (&c * &c).trace()
        + 4.0 * (&c * &g_e).trace();
    let den = stack_gram(z, z)?.norm();
    if den == 0.0 {
        return Err(SyncError::InvalidArgument("reference stack is zero".into()));
    }
    Ok(num_sq.max(0.0).sqrt() / den)
}

/// Aligns `xhat` to `truth` with one rotation and reports every metric.
pub fn evaluate(xhat: &BlockStack, truth: &BlockStack) -> Result<EvalReport> {
    check_same_shape(xhat, truth)?;
    let q = match optimal_rotation(truth, xhat) {
        Ok(s) => s.value,
        Err(SyncError::SingularInput { .. }) => polar_factor(&stack_gram(truth, xhat)?),
        Err(e) => return Err(e),
    };
    let aligned = truth.right_mul(&q);
    let residuals: Vec<f64> = (0..xhat.n())
        .map(|i| (xhat.block(i) - aligned.block(i)).norm())
        .collect();
    let d_f_sq: f64 = residuals.iter().map(|r| r * r).sum();
    Ok(EvalReport {
        d_f: d_f_sq.sqrt(),
        rel_err: rel_error(xhat, truth)?,
        mse: d_f_sq / xhat.n() as f64,
        residuals,
        q_align: q.as_slice().to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::sample_ground_truth;
    use nalgebra::dmatrix;

    fn rel_error_dense(x: &BlockStack, z: &BlockStack) -> f64 {
        let (xm, zm) = (x.to_matrix(), z.to_matrix());
        let zz = &zm * zm.transpose();
        (&zz - &xm * xm.transpose()).norm() / zz.norm()
    }

    #[test]
    fn distance_to_self_is_zero() {
        let z = sample_ground_truth(5, 3, 1).unwrap();
        let (d, q) = dist_frob(&z, &z).unwrap();
        assert!(d < 1e-12);
        assert!((q.unwrap() - DMatrix::identity(3, 3)).norm() < 1e-12);
    }

    #[test]
    fn antipodal_d1_uses_nuclear_fallback() {
        let x = BlockStack::from_blocks(&[dmatrix![1.0], dmatrix![1.0]]).unwrap();
        let y = BlockStack::from_blocks(&[dmatrix![1.0], dmatrix![-1.0]]).unwrap();
        let (d, q) = dist_frob(&x, &y).unwrap();
        assert!(q.is_none());
        assert!((d - 2.0).abs() < 1e-15);
    }

    #[test]
    fn rel_error_matches_dense_and_is_rotation_invariant() {
        let z = sample_ground_truth(20, 3, 3).unwrap();
        let w = sample_ground_truth(20, 3, 4).unwrap();
        // a perturbed copy and an unrelated stack
        let mut x = z.clone();
        for i in 0..20 {
            let mut b = x.block_mut(i);
            b += w.block(i) * 0.05;
        }
        for cand in [&x, &w] {
            let r = rel_error(cand, &z).unwrap();
            assert!((r - rel_error_dense(cand, &z)).abs() < 1e-12, "{r}");
            let q = sample_ground_truth(2, 3, 7).unwrap().block_owned(0);
            assert!((rel_error(&cand.right_mul(&q), &z).unwrap() - r).abs() < 1e-12);
        }
        assert!(rel_error(&z, &z).unwrap() < 1e-15);
        let q = sample_ground_truth(2, 3, 8).unwrap().block_owned(1);
        assert!(rel_error(&z.right_mul(&q), &z).unwrap() < 1e-14);
    }

    #[test]
    fn rel_error_denominator_is_n_sqrt_d() {
        let z = sample_ground_truth(500, 25, 1).unwrap();
        let den = stack_gram(&z, &z).unwrap().norm();
        assert!((den - 2500.0).abs() < 1e-9);
    }

    #[test]
    fn evaluate_consistency() {
        let z = sample_ground_truth(30, 3, 2).unwrap();
        let q = sample_ground_truth(2, 3, 5).unwrap().block_owned(0);
        let mut xhat = z.right_mul(&q);
        let r = sample_ground_truth(2, 3, 6).unwrap().block_owned(1);
        xhat.block_mut(4).copy_from(&r);
        let rep = evaluate(&xhat, &z).unwrap();
        let sum_sq: f64 = rep.residuals.iter().map(|r| r * r).sum();
        assert!((rep.d_f.powi(2) - sum_sq).abs() <= 1e-12 * sum_sq);
        assert!((rep.mse - sum_sq / 30.0).abs() <= 1e-12 * rep.mse);
        let (d, _) = dist_frob(&xhat, &z).unwrap();
        assert!((d - rep.d_f).abs() < 1e-12);

        let perfect = evaluate(&z, &z).unwrap();
        assert!(perfect.d_f < 1e-12 && perfect.mse < 1e-24 && perfect.rel_err < 1e-15);
        assert!(perfect.residuals.iter().all(|&r| r < 1e-12));
    }

    #[test]
    fn dimension_mismatch() {
        let a = sample_ground_truth(4, 2, 1).unwrap();
        let b = sample_ground_truth(5, 2, 1).unwrap();
        assert!(matches!(dist_frob(&a, &b), Err(SyncError::DimensionMismatch(_))));
        assert!(rel_error(&a, &b).is_err());
        assert!(evaluate(&a, &b).is_err());
    }
}
