//! Spectral initialization, the NS-RGS iteration, the GPM baseline and the
//! objective, with per-iteration telemetry.

use std::time::Instant;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blockmat::{
    matrix_sign_svd, newton_schulz, orthogonality_defect, tangent_project, BlockStack, SignMethod,
    SquareBlock,
};
use crate::datagen::BlockObservation;
use crate::error::{Result, SyncError};
use crate::metrics::{dist_frob, polar_factor, rel_error};

/// Largest `nd` handled by the dense eigensolver.
pub const DENSE_EIG_MAX_DIM: usize = 1500;
pub const SUBSPACE_TOL: f64 = 1e-10;
pub const SUBSPACE_MAX_SWEEPS: usize = 5000;

// below this fraction of its constant part the fast objective is recomputed
// from the blocks directly
const FAST_OBJECTIVE_RTOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    NsRgs,
    Gpm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Retraction {
    NewtonSchulz,
    ExactSvd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Step size; `None` means `1 / (n p)` with `p` the observed pair fraction.
    pub mu: Option<f64>,
    pub t_s: usize,
    pub max_iter: usize,
    pub stop_tol: f64,
    pub retraction: Retraction,
    pub algorithm: Algorithm,
    /// Use the observed degree instead of `n - 1` for the identity term of
    /// the gradient.
    pub degree_normalized: bool,
    /// Record `||I - F^T F||_2` and the retraction error every iteration.
    pub step_stats: bool,
    /// Update blocks on the rayon pool.
    pub parallel: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            mu: None,
            t_s: 1,
            max_iter: 100,
            stop_tol: 1e-8,
            retraction: Retraction::NewtonSchulz,
            algorithm: Algorithm::NsRgs,
            degree_normalized: false,
            step_stats: true,
            parallel: false,
        }
    }
}

impl SolverConfig {
    pub fn gpm() -> Self {
        SolverConfig {
            algorithm: Algorithm::Gpm,
            retraction: Retraction::ExactSvd,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(mu) = self.mu {
            if !(mu > 0.0 && mu.is_finite()) {
                return Err(SyncError::InvalidArgument(format!("mu must be > 0, got {mu}")));
            }
        }
        if self.algorithm == Algorithm::NsRgs
            && self.retraction == Retraction::NewtonSchulz
            && self.t_s < 1
        {
            return Err(SyncError::InvalidArgument(
                "t_s must be >= 1 with the Newton-Schulz retraction".into(),
            ));
        }
        if self.max_iter < 1 {
            return Err(SyncError::InvalidArgument("max_iter must be >= 1".into()));
        }
        if !(self.stop_tol > 0.0) {
            return Err(SyncError::InvalidArgument(format!(
                "stop_tol must be > 0, got {}",
                self.stop_tol
            )));
        }
        Ok(())
    }

    /// The step size actually used on `obs`.
    pub fn step_size(&self, obs: &BlockObservation) -> f64 {
        self.mu
            .unwrap_or_else(|| 1.0 / (obs.n() as f64 * obs.observed_fraction()))
    }

    fn sign_method(&self) -> SignMethod {
        match (self.algorithm, self.retraction) {
            (Algorithm::NsRgs, Retraction::NewtonSchulz) => SignMethod::NewtonSchulz(self.t_s),
            _ => SignMethod::ExactSvd,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EigMethod {
    Dense,
    SubspaceIteration { sweeps: usize },
}

#[derive(Debug, Clone)]
pub struct SpectralInit {
    pub x0: BlockStack,
    pub method: EigMethod,
    /// Top `d` eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
}

/// `X^0 = sgn(Y)` blockwise, `Y` the top-`d` eigenvectors of `A`.
pub fn spectral_init(obs: &BlockObservation) -> Result<SpectralInit> {
    spectral_init_with(obs, false)
}

pub fn spectral_init_with(obs: &BlockObservation, parallel: bool) -> Result<SpectralInit> {
    let (n, d) = (obs.n(), obs.d());
    let (y, eigenvalues, method) = if n * d <= DENSE_EIG_MAX_DIM {
        let (y, vals) = dense_top_eigenvectors(obs)?;
        (y, vals, EigMethod::Dense)
    } else {
        let (y, vals, sweeps) = subspace_iteration(obs, parallel)?;
        (y, vals, EigMethod::SubspaceIteration { sweeps })
    };
    let x0 = BlockStack::from_matrix(&y)?.sign_exact()?;
    Ok(SpectralInit {
        x0,
        method,
        eigenvalues,
    })
}

fn dense_top_eigenvectors(obs: &BlockObservation) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let d = obs.d();
    let eig = SymmetricEigen::new(obs.to_dense());
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let scale = vals.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let gap = vals[d - 1] - vals.get(d).copied().unwrap_or(f64::NEG_INFINITY);
    if !(vals[d - 1] > 0.0) || !(gap > 1e-12 * scale) {
        return Err(SyncError::EigSolverFailure(format!(
            "no spectral gap after the top {d} eigenvalues (lambda_d = {:e}, gap = {:e})",
            vals[d - 1], gap
        )));
    }
    let y = DMatrix::from_fn(eig.eigenvectors.nrows(), d, |r, c| {
        eig.eigenvectors[(r, order[c])]
    });
    Ok((y, vals[..d].to_vec()))
}

/// Block subspace iteration with a Rayleigh-Ritz rotation each sweep.
fn subspace_iteration(
    obs: &BlockObservation,
    parallel: bool,
) -> Result<(DMatrix<f64>, Vec<f64>, usize)> {
    let (n, d) = (obs.n(), obs.d());
    let hub = (0..n).max_by_key(|&i| obs.degree(i)).unwrap_or(0);
    let mut start = BlockStack::zeros(n, d);
    for i in 0..n {
        if i != hub {
            start.block_mut(i).copy_from(&obs.block(i, hub));
        }
    }
    let mut y = start.to_matrix();
    let scale = 1e-3 * y.norm().max(1.0) / ((n * d * d) as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    y.iter_mut()
        .for_each(|v| *v += scale * Distribution::<f64>::sample(&StandardNormal, &mut rng));
    y = y.qr().q();

    for sweep in 1..=SUBSPACE_MAX_SWEEPS {
        let ay = obs.apply(&BlockStack::from_matrix(&y)?, parallel)?.to_matrix();
        let h = y.transpose() * &ay;
        let h = (&h + h.transpose()) * 0.5;
        let h_norm = h.norm();
        if !(h_norm > 0.0) || !h_norm.is_finite() {
            return Err(SyncError::EigSolverFailure(
                "observation annihilates the iteration subspace".into(),
            ));
        }
        let residual = (&ay - &y * &h).norm() / h_norm;
        if residual <= SUBSPACE_TOL {
            let eig = SymmetricEigen::new(h);
            let mut order: Vec<usize> = (0..d).collect();
            order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
            let vals: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k]).collect();
            if !(vals[d - 1] > 0.0) {
                return Err(SyncError::EigSolverFailure(format!(
                    "dominant invariant subspace has a nonpositive Ritz value {:e}",
                    vals[d - 1]
                )));
            }
            let v = DMatrix::from_fn(d, d, |r, c| eig.eigenvectors[(r, order[c])]);
            return Ok((y * v, vals, sweep));
        }
        y = ay.qr().q();
    }
    Err(SyncError::EigSolverFailure(format!(
        "subspace iteration did not reach {SUBSPACE_TOL:e} in {SUBSPACE_MAX_SWEEPS} sweeps"
    )))
}

/// Diagnostics of one update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    /// `max_i ||I - F_i^T F_i||_2` (NS-RGS only).
    pub max_ns_defect: Option<f64>,
    /// `||X^+ - sgn(F)||_F`.
    pub retraction_error: f64,
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub x: BlockStack,
    pub stats: Option<StepStats>,
    /// Seconds spent in the blockwise update (tangent step and retraction).
    pub update_time_s: f64,
}

/// One Jacobi sweep of the configured algorithm given `b = A x`.
pub fn step(
    x: &BlockStack,
    b: &BlockStack,
    obs: &BlockObservation,
    config: &SolverConfig,
    mu: f64,
) -> Result<StepOutput> {
    let (n, d) = (x.n(), x.d());
    let dd = d * d;
    let algorithm = config.algorithm;
    let method = config.sign_method();
    let identity_coef = |i: usize| {
        if config.degree_normalized {
            obs.degree(i) as f64
        } else {
            (n - 1) as f64
        }
    };

    let start = Instant::now();
    let mut out = BlockStack::zeros(n, d);
    let mut pre = vec![0.0; if config.step_stats { n * dd } else { 0 }];
    let update = |i: usize, dst: &mut [f64], keep: Option<&mut [f64]>| -> Result<()> {
        let xi = x.block(i);
        let f = match algorithm {
            Algorithm::NsRgs => {
                let g = xi * identity_coef(i) - b.block(i);
                let xi = xi.into_owned();
                &xi - tangent_project(&xi, &g) * mu
            }
            Algorithm::Gpm => b.block_owned(i),
        };
        let next = match method {
            SignMethod::NewtonSchulz(t_s) => newton_schulz(&f, t_s),
            SignMethod::ExactSvd => matrix_sign_svd(&f).map(|s| s.value),
        }
        .map_err(|e| e.at_block(i))?;
        dst.copy_from_slice(next.as_slice());
        if let Some(keep) = keep {
            keep.copy_from_slice(f.as_slice());
        }
        Ok(())
    };
    let results: Vec<Result<()>> = match (config.parallel, config.step_stats) {
        (true, true) => out
            .raw_mut()
            .par_chunks_mut(dd)
            .zip(pre.par_chunks_mut(dd))
            .enumerate()
            .map(|(i, (dst, keep))| update(i, dst, Some(keep)))
            .collect(),
        (true, false) => out
            .raw_mut()
            .par_chunks_mut(dd)
            .enumerate()
            .map(|(i, dst)| update(i, dst, None))
            .collect(),
        (false, true) => out
            .raw_mut()
            .chunks_mut(dd)
            .zip(pre.chunks_mut(dd))
            .enumerate()
            .map(|(i, (dst, keep))| update(i, dst, Some(keep)))
            .collect(),
        (false, false) => out
            .raw_mut()
            .chunks_mut(dd)
            .enumerate()
            .map(|(i, dst)| update(i, dst, None))
            .collect(),
    };
    let update_time_s = start.elapsed().as_secs_f64();
    results.into_iter().collect::<Result<Vec<()>>>()?;
    if method == SignMethod::ExactSvd {
        out.set_orthogonal_flag(true);
    }

    let stats = config.step_stats.then(|| {
        let pre = BlockStack::from_raw(n, d, pre).expect("pre-retraction buffer has n*d*d values");
        step_stats(&pre, &out, algorithm, method)
    });
    Ok(StepOutput {
        x: out,
        stats,
        update_time_s,
    })
}

fn step_stats(pre: &BlockStack, post: &BlockStack, algorithm: Algorithm, method: SignMethod) -> StepStats {
    let max_ns_defect = (algorithm == Algorithm::NsRgs).then(|| {
        pre.blocks()
            .map(|f| orthogonality_defect(&f.into_owned()))
            .fold(0.0, f64::max)
    });
    let retraction_error = match method {
        SignMethod::ExactSvd => 0.0,
        SignMethod::NewtonSchulz(_) => pre
            .blocks()
            .zip(post.blocks())
            .map(|(f, x)| (x - polar_factor(&f.into_owned())).norm_squared())
            .sum::<f64>()
            .sqrt(),
    };
    StepStats {
        max_ns_defect,
        retraction_error,
    }
}

/// One NS-RGS update of `x`.
pub fn ns_rgs_step(x: &BlockStack, obs: &BlockObservation, config: &SolverConfig) -> Result<StepOutput> {
    let config = SolverConfig {
        algorithm: Algorithm::NsRgs,
        ..config.clone()
    };
    let b = obs.apply(x, config.parallel)?;
    step(x, &b, obs, &config, config.step_size(obs))
}

/// One GPM update `X_i <- sgn(sum_j A_ij X_j)`.
pub fn gpm_step(x: &BlockStack, obs: &BlockObservation) -> Result<BlockStack> {
    let config = SolverConfig {
        step_stats: false,
        ..SolverConfig::gpm()
    };
    let b = obs.apply(x, false)?;
    Ok(step(x, &b, obs, &config, 0.0)?.x)
}

/// `F(X) = sum_{i<j observed} ||X_i X_j^T - A_ij||_F^2`, which equals the
/// half-sum over ordered pairs.
pub fn objective(x: &BlockStack, obs: &BlockObservation) -> Result<f64> {
    if x.n() != obs.n() || x.d() != obs.d() {
        return Err(SyncError::DimensionMismatch(format!(
            "stack has {}x{} blocks, observation expects {}x{}",
            x.n(),
            x.d(),
            obs.n(),
            obs.d()
        )));
    }
    let d = x.d();
    let mut m = DMatrix::zeros(d, d);
    let mut total = 0.0;
    for (e, &(i, j)) in obs.edges().iter().enumerate() {
        m.copy_from(&obs.edge_block(e));
        m.gemm(1.0, &x.block(i), &x.block(j).transpose(), -1.0);
        total += m.norm_squared();
    }
    Ok(total)
}

/// The objective from `b = A x` without forming `X_i X_j^T`:
/// `sum_{i<j} (<X_i^T X_i, X_j^T X_j> + ||A_ij||^2) - sum_i <X_i, B_i>`.
pub(crate) fn objective_from_product(
    x: &BlockStack,
    b: &BlockStack,
    obs: &BlockObservation,
) -> Result<f64> {
    let grams: Vec<SquareBlock> = x.blocks().map(|xi| xi.transpose() * xi).collect();
    let mut constant = obs.upper_frobenius_sq();
    for &(i, j) in obs.edges() {
        constant += grams[i].dot(&grams[j]);
    }
    let cross: f64 = x.blocks().zip(b.blocks()).map(|(xi, bi)| xi.dot(&bi)).sum();
    let fast = constant - cross;
    if fast > FAST_OBJECTIVE_RTOL * constant {
        Ok(fast)
    } else {
        objective(x, obs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    RelativeDecrease,
    ZeroObjective,
    MaxIter,
}

/// One trace row. Row `t = 0` describes the initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub t: usize,
    pub objective: f64,
    /// `R^t = (F(X^{t-1}) - F(X^t)) / F(X^t)`; absent at `t = 0`.
    pub rel_decrease: Option<f64>,
    pub d_f: Option<f64>,
    pub rel_err: Option<f64>,
    /// `e_F^t`; zero at `t = 0`, absent without step stats.
    pub retraction_error: Option<f64>,
    pub max_ns_defect: Option<f64>,
    pub max_orth_defect: f64,
    /// Wall-clock seconds of the iteration, objective included.
    pub time_s: f64,
    /// Part of `time_s` spent in the blockwise update.
    pub update_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub records: Vec<IterationRecord>,
    pub mu: f64,
    pub init_method: Option<EigMethod>,
    pub init_time_s: f64,
    pub stop_reason: StopReason,
}

impl IterationTrace {
    /// Completed iterations, initialization excluded.
    pub fn iterations(&self) -> usize {
        self.records.len().saturating_sub(1)
    }

    pub fn last(&self) -> &IterationRecord {
        self.records.last().expect("trace always holds the initial row")
    }

    pub fn solve_time_s(&self) -> f64 {
        self.records.iter().map(|r| r.time_s).sum()
    }

    /// Mean wall-clock seconds per iteration.
    pub fn mean_iteration_time_s(&self) -> f64 {
        let it = self.iterations();
        if it == 0 {
            0.0
        } else {
            self.solve_time_s() / it as f64
        }
    }

    pub fn max_ns_defect(&self) -> Option<f64> {
        self.records
            .iter()
            .filter_map(|r| r.max_ns_defect)
            .reduce(f64::max)
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub x: BlockStack,
    pub trace: IterationTrace,
}

/// Spectral initialization followed by [`run_from`].
pub fn run(obs: &BlockObservation, config: &SolverConfig, truth: Option<&BlockStack>) -> Result<RunOutcome> {
    config.validate()?;
    let start = Instant::now();
    let init = spectral_init_with(obs, config.parallel)?;
    let init_time_s = start.elapsed().as_secs_f64();
    let mut out = run_from(obs, init.x0, config, truth)?;
    out.trace.init_method = Some(init.method);
    out.trace.init_time_s = init_time_s;
    Ok(out)
}

/// Iterates the configured algorithm from `x0` until the relative decrease
/// drops below `stop_tol`, the objective vanishes, or `max_iter` is reached.
pub fn run_from(
    obs: &BlockObservation,
    x0: BlockStack,
    config: &SolverConfig,
    truth: Option<&BlockStack>,
) -> Result<RunOutcome> {
    config.validate()?;
    if let Some(z) = truth {
        if z.n() != obs.n() || z.d() != obs.d() {
            return Err(SyncError::DimensionMismatch("truth does not match the observation".into()));
        }
    }
    let mu = config.step_size(obs);
    let accuracy = |x: &BlockStack| -> Result<(Option<f64>, Option<f64>)> {
        match truth {
            Some(z) => Ok((Some(dist_frob(x, z)?.0), Some(rel_error(x, z)?))),
            None => Ok((None, None)),
        }
    };

    let mut x = x0;
    let mut b = obs.apply(&x, config.parallel)?;
    let mut f = objective_from_product(&x, &b, obs)?;
    if !f.is_finite() {
        return Err(SyncError::NonFiniteObjective { iteration: 0 });
    }
    let (d_f, rel_err) = accuracy(&x)?;
    let mut records = vec![IterationRecord {
        t: 0,
        objective: f,
        rel_decrease: None,
        d_f,
        rel_err,
        retraction_error: config.step_stats.then_some(0.0),
        max_ns_defect: None,
        max_orth_defect: x.max_orthogonality_defect(),
        time_s: 0.0,
        update_time_s: 0.0,
    }];
    let mut stop_reason = StopReason::MaxIter;
    if f == 0.0 {
        stop_reason = StopReason::ZeroObjective;
    } else {
        for t in 1..=config.max_iter {
            let start = Instant::now();
            let next = step(&x, &b, obs, config, mu)?;
            let b_next = obs.apply(&next.x, config.parallel)?;
            let f_next = objective_from_product(&next.x, &b_next, obs)?;
            let time_s = start.elapsed().as_secs_f64();
            if !f_next.is_finite() {
                return Err(SyncError::NonFiniteObjective { iteration: t });
            }
            x = next.x;
            b = b_next;
            let rel_decrease = (f_next > 0.0).then(|| (f - f_next) / f_next);
            f = f_next;
            let (d_f, rel_err) = accuracy(&x)?;
            records.push(IterationRecord {
                t,
                objective: f,
                rel_decrease,
                d_f,
                rel_err,
                retraction_error: next.stats.map(|s| s.retraction_error),
                max_ns_defect: next.stats.and_then(|s| s.max_ns_defect),
                max_orth_defect: x.max_orthogonality_defect(),
                time_s,
                update_time_s: next.update_time_s,
            });
            match rel_decrease {
                None => {
                    stop_reason = StopReason::ZeroObjective;
                    break;
                }
                Some(r) if r < config.stop_tol => {
                    stop_reason = StopReason::RelativeDecrease;
                    break;
                }
                Some(_) => {}
            }
        }
    }
    Ok(RunOutcome {
        x,
        trace: IterationTrace {
            records,
            mu,
            init_method: None,
            init_time_s: 0.0,
            stop_reason,
        },
    })
}
