//! Synthetic instance generation and external data ingestion.
//!
//! Random streams: every generator is a `ChaCha8Rng` seeded with
//! `seed_from_u64(seed)`. Ground-truth draws use stream 0 and the observation
//! (mask coins, then noise blocks) uses stream 1, so two instances sharing a
//! seed share their ground truth, mask and noise regardless of `sigma`.

mod io;
mod observation;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::blockmat::{matrix_sign_svd, BlockStack, TOL_ORTH};
use crate::error::{Result, SyncError};

pub use io::{
    load_edge_list, load_instance, load_poses, save_edge_list, save_instance, save_poses,
    InstanceMeta, INSTANCE_SCHEMA_VERSION,
};
pub use observation::BlockObservation;
pub(crate) use observation::ObservationBuilder;

const TRUTH_STREAM: u64 = 0;
const OBSERVATION_STREAM: u64 = 1;
const MAX_SIGN_ATTEMPTS: usize = 3;

/// Parameters of the synthetic measurement model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub n: usize,
    pub d: usize,
    pub sigma: f64,
    pub p: f64,
    pub seed: u64,
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(SyncError::InvalidArgument(format!("n must be >= 2, got {}", self.n)));
        }
        if self.d < 1 {
            return Err(SyncError::InvalidArgument("d must be >= 1".into()));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(SyncError::InvalidArgument(format!(
                "sigma must be a finite value >= 0, got {}",
                self.sigma
            )));
        }
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(SyncError::InvalidArgument(format!(
                "p must lie in (0, 1], got {}",
                self.p
            )));
        }
        Ok(())
    }
}

/// An observation together with whatever is known about how it was made.
#[derive(Debug, Clone, PartialEq)]
pub struct SyncInstance {
    pub observation: BlockObservation,
    pub ground_truth: Option<BlockStack>,
    /// Present for synthetic instances only.
    pub params: Option<SynthParams>,
}

impl SyncInstance {
    pub fn n(&self) -> usize {
        self.observation.n()
    }

    pub fn d(&self) -> usize {
        self.observation.d()
    }

    pub fn sigma(&self) -> Option<f64> {
        self.params.map(|p| p.sigma)
    }

    pub fn truth(&self) -> Result<&BlockStack> {
        self.ground_truth.as_ref().ok_or(SyncError::TruthRequired)
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn gaussian_block<R: Rng>(rng: &mut R, d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(d, d, |_, _| rng.sample(StandardNormal))
}

/// Ground truth: each block is the sign of an i.i.d. standard Gaussian matrix.
pub fn sample_ground_truth(n: usize, d: usize, seed: u64) -> Result<BlockStack> {
    if n < 2 || d < 1 {
        return Err(SyncError::InvalidArgument(format!(
            "ground truth needs n >= 2 and d >= 1 (got n={n}, d={d})"
        )));
    }
    let mut rng = rng_for(seed, TRUTH_STREAM);
    let mut z = BlockStack::zeros(n, d);
    for i in 0..n {
        let mut attempt = 0;
        let sign = loop {
            attempt += 1;
            match matrix_sign_svd(&gaussian_block(&mut rng, d)) {
                Ok(s) => break s.value,
                Err(e) if attempt >= MAX_SIGN_ATTEMPTS => return Err(e.at_block(i)),
                Err(_) => continue,
            }
        };
        z.block_mut(i).copy_from(&sign);
    }
    z.set_orthogonal_flag(true);
    Ok(z)
}

/// `A_ij = Z_i Z_j^T + sigma W_ij` on pairs observed with probability `p`.
///
/// Pairs are visited as `i < j` ascending. Each pair draws one uniform coin;
/// observed pairs then draw `d^2` standard normals (column-major). The draws
/// do not depend on `sigma`.
pub fn assemble_observation(z: &BlockStack, sigma: f64, p: f64, seed: u64) -> Result<BlockObservation> {
    let (n, d) = (z.n(), z.d());
    SynthParams {
        n,
        d,
        sigma,
        p,
        seed,
    }
    .validate()?;
    if !z.is_orthogonal(TOL_ORTH) {
        return Err(SyncError::InvalidArgument(
            "ground truth blocks must be orthogonal".into(),
        ));
    }
    let mut rng = rng_for(seed, OBSERVATION_STREAM);
    let mut builder = ObservationBuilder::new(n, d);
    let mut a = DMatrix::zeros(d, d);
    for i in 0..n {
        for j in i + 1..n {
            let coin: f64 = rng.random();
            if coin >= p {
                continue;
            }
            let w = gaussian_block(&mut rng, d);
            a.gemm(1.0, &z.block(i), &z.block(j).transpose(), 0.0);
            a += w * sigma;
            builder.push(i, j, a.as_slice());
        }
    }
    Ok(builder.finish())
}

/// Full synthetic instance for `params`.
pub fn generate(params: &SynthParams) -> Result<SyncInstance> {
    params.validate()?;
    let z = sample_ground_truth(params.n, params.d, params.seed)?;
    let observation = assemble_observation(&z, params.sigma, params.p, params.seed)?;
    Ok(SyncInstance {
        observation,
        ground_truth: Some(z),
        params: Some(*params),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn d1_truth_is_signs() {
        for seed in 0..5 {
            let z = sample_ground_truth(2, 1, seed).unwrap();
            for b in z.blocks() {
                assert!(b[(0, 0)] == 1.0 || b[(0, 0)] == -1.0);
            }
        }
    }

    #[test]
    fn truth_is_orthogonal_and_deterministic() {
        let z = sample_ground_truth(100, 3, 11).unwrap();
        assert!(z.is_orthogonal(1e-10));
        assert!(z.is_flagged_orthogonal());
        assert_eq!(z, sample_ground_truth(100, 3, 11).unwrap());
        assert_ne!(z, sample_ground_truth(100, 3, 12).unwrap());
    }

    #[test]
    fn noiseless_complete_blocks_are_relative_rotations() {
        let z = sample_ground_truth(6, 3, 1).unwrap();
        let obs = assemble_observation(&z, 0.0, 1.0, 2).unwrap();
        assert_eq!(obs.num_edges(), 15);
        for i in 0..6 {
            assert!(!obs.mask(i, i));
            for j in 0..6 {
                if i != j {
                    assert!(obs.mask(i, j));
                    let expect = z.block(i) * z.block(j).transpose();
                    assert_eq!(obs.block(i, j), expect);
                }
            }
        }
    }

    #[test]
    fn invalid_parameters() {
        let z = sample_ground_truth(4, 2, 0).unwrap();
        assert!(assemble_observation(&z, 0.1, 0.0, 0).is_err());
        assert!(assemble_observation(&z, 0.1, 1.5, 0).is_err());
        assert!(assemble_observation(&z, -0.1, 0.5, 0).is_err());
        assert!(sample_ground_truth(1, 2, 0).is_err());
    }
}
