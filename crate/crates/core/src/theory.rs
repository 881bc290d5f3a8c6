//! Leave-one-out auxiliary sequences and numerical checks of the contraction
//! analysis: distance to truth, per-node deviation, incoherence against the
//! noise rows, the Newton-Schulz feasibility region and the contraction
//! inequality.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blockmat::{optimal_rotation, stack_gram, BlockStack};
use crate::datagen::{BlockObservation, SyncInstance};
use crate::error::{Result, SyncError};
use crate::metrics::{dist_frob, polar_factor};
use crate::solver::{spectral_init, step, IterationTrace, Retraction, SolverConfig, StepStats};

/// Largest distance-to-truth ratio `d_F / sqrt(n)` accepted as lying in the
/// contraction region.
pub const RIC_DISTANCE_RATIO: f64 = 0.5;

/// Observation with the noise of row and column `l` (0-based) removed:
/// every observed block touching `l` becomes `Z_i Z_j^T`.
pub fn leave_one_out_observation(instance: &SyncInstance, l: usize) -> Result<BlockObservation> {
    let signal = noiseless_signal(instance)?;
    leave_one_out_from_signal(&instance.observation, &signal, l)
}

/// `Z_i Z_j^T` on the observed pairs of the instance.
pub fn noiseless_signal(instance: &SyncInstance) -> Result<BlockObservation> {
    let z = instance.truth()?;
    Ok(instance
        .observation
        .map_blocks(|i, j, _| z.block(i) * z.block(j).transpose()))
}

fn leave_one_out_from_signal(
    obs: &BlockObservation,
    signal: &BlockObservation,
    l: usize,
) -> Result<BlockObservation> {
    if l >= obs.n() {
        return Err(SyncError::InvalidArgument(format!(
            "leave-one-out index {} outside 1..={}",
            l + 1,
            obs.n()
        )));
    }
    Ok(obs.map_blocks(|i, j, a| {
        if i == l || j == l {
            let e = signal.edge_index(i, j).expect("signal shares the mask");
            signal.edge_block(e).into_owned()
        } else {
            a.into_owned()
        }
    }))
}

/// Per-iteration quantities of the main sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryRow {
    pub t: usize,
    /// `d_F(X^t, Z) / sqrt(n)`.
    pub dist_ratio: f64,
    /// `max_i ||X_i^t - Z_i Q^t||_F` with `Q^t = sgn(Z^T X^t)`.
    pub max_node_deviation: f64,
    /// `max_l d_F(X^t, X^{t,(l)})`.
    pub max_loo_distance: f64,
    /// `max_l ||sum_j W_lj X_j^t||_F / (sqrt(nd) (sqrt(d) + 10 sqrt(log n)))`.
    pub incoherence_ratio: f64,
    /// `max_i ||I - F_i^T F_i||_2` of the step producing `X^t`.
    pub max_ns_defect: Option<f64>,
    /// `e_F^t`.
    pub retraction_error: f64,
    /// `d_F(X^{t+1}, Z) / d_F(X^t, Z)`; absent on the last row.
    pub contraction_ratio: Option<f64>,
    /// `sigma_min(Z^T X^t) - (n - d_F(X^t, Z)^2 / 2)`.
    pub sigma_min_margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub n: usize,
    pub d: usize,
    pub sigma: Option<f64>,
    pub rows: Vec<TheoryRow>,
}

impl TheoryReport {
    /// `max_t D_t / D_1` for the leave-one-out distance `D_t`; zero when the
    /// sequences coincide.
    pub fn loo_growth(&self) -> f64 {
        let base = self.rows.get(1).map_or(0.0, |r| r.max_loo_distance);
        let peak = self
            .rows
            .iter()
            .skip(1)
            .map(|r| r.max_loo_distance)
            .fold(0.0, f64::max);
        if peak == 0.0 {
            0.0
        } else {
            peak / base
        }
    }

    pub fn max_incoherence_ratio(&self) -> f64 {
        self.rows.iter().map(|r| r.incoherence_ratio).fold(0.0, f64::max)
    }

    /// Whether `sigma_min(Z^T X^t) >= n - d_F^2 / 2` held every iteration.
    pub fn sigma_min_bound_holds(&self) -> bool {
        let slack = 1e-9 * self.n as f64;
        self.rows.iter().all(|r| r.sigma_min_margin >= -slack)
    }

    /// Long format: `t,quantity,value`, one line per recorded value.
    pub fn to_long_csv(&self) -> String {
        let mut out = String::from("t,quantity,value\n");
        for r in &self.rows {
            let mut put = |name: &str, v: f64| {
                let _ = writeln!(out, "{},{name},{v:e}", r.t);
            };
            put("dist_ratio", r.dist_ratio);
            put("max_node_deviation", r.max_node_deviation);
            put("max_loo_distance", r.max_loo_distance);
            put("incoherence_ratio", r.incoherence_ratio);
            if let Some(v) = r.max_ns_defect {
                put("max_ns_defect", v);
            }
            put("retraction_error", r.retraction_error);
            if let Some(v) = r.contraction_ratio {
                put("contraction_ratio", v);
            }
            put("sigma_min_margin", r.sigma_min_margin);
        }
        out
    }
}

/// `t_max` steps from spectral initialization without early stopping.
fn fixed_sequence(
    obs: &BlockObservation,
    config: &SolverConfig,
    t_max: usize,
) -> Result<(Vec<BlockStack>, Vec<Option<StepStats>>)> {
    let mu = config.step_size(obs);
    let mut xs = vec![spectral_init(obs)?.x0];
    let mut stats = vec![None];
    for _ in 0..t_max {
        let x = xs.last().expect("sequence starts with X^0");
        let b = obs.apply(x, false)?;
        let next = step(x, &b, obs, config, mu)?;
        xs.push(next.x);
        stats.push(next.stats);
    }
    Ok((xs, stats))
}

/// Runs the main sequence with `config` and the `n` leave-one-out sequences
/// (exact retraction, same step size) for `t_max` iterations each.
pub fn run_loo_suite(instance: &SyncInstance, config: &SolverConfig, t_max: usize) -> Result<TheoryReport> {
    config.validate()?;
    let z = instance.truth()?;
    let obs = &instance.observation;
    let (n, d) = (obs.n(), obs.d());
    let signal = noiseless_signal(instance)?;

    let main_config = SolverConfig {
        step_stats: true,
        parallel: false,
        ..config.clone()
    };
    let (xs, stats) = fixed_sequence(obs, &main_config, t_max).map_err(|e| e.in_sequence(0))?;

    let aux_config = SolverConfig {
        mu: Some(config.step_size(obs)),
        retraction: Retraction::ExactSvd,
        step_stats: false,
        parallel: false,
        ..config.clone()
    };
    let run_aux = |l: usize| -> Result<Vec<f64>> {
        let aux_obs = leave_one_out_from_signal(obs, &signal, l)?;
        let (aux, _) = fixed_sequence(&aux_obs, &aux_config, t_max)?;
        xs.iter()
            .zip(&aux)
            .map(|(x, y)| dist_frob(x, y).map(|r| r.0))
            .collect()
    };
    let loo: Vec<Vec<f64>> = if config.parallel {
        (0..n)
            .into_par_iter()
            .map(|l| run_aux(l).map_err(|e| e.in_sequence(l + 1)))
            .collect::<Result<_>>()?
    } else {
        (0..n)
            .map(|l| run_aux(l).map_err(|e| e.in_sequence(l + 1)))
            .collect::<Result<_>>()?
    };

    let sigma = instance.sigma();
    let normalizer = ((n * d) as f64).sqrt() * ((d as f64).sqrt() + 10.0 * (n as f64).ln().sqrt());
    let dists: Vec<f64> = xs
        .iter()
        .map(|x| dist_frob(x, z).map(|r| r.0))
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(xs.len());
    for (t, x) in xs.iter().enumerate() {
        let gram = stack_gram(z, x)?;
        let q = match optimal_rotation(z, x) {
            Ok(s) => s.value,
            Err(_) => polar_factor(&gram),
        };
        let aligned = z.right_mul(&q);
        let max_node_deviation = (0..n)
            .map(|i| (x.block(i) - aligned.block(i)).norm())
            .fold(0.0, f64::max);
        let sigma_min = gram.singular_values().min();
        let incoherence_ratio = match sigma {
            Some(s) if s > 0.0 => {
                let noisy = obs.apply(x, false)?;
                let clean = signal.apply(x, false)?;
                noisy
                    .blocks()
                    .zip(clean.blocks())
                    .map(|(a, c)| (a - c).norm() / s)
                    .fold(0.0, f64::max)
                    / normalizer
            }
            _ => 0.0,
        };
        let step_stats = stats[t];
        rows.push(TheoryRow {
            t,
            dist_ratio: dists[t] / (n as f64).sqrt(),
            max_node_deviation,
            max_loo_distance: loo.iter().map(|v| v[t]).fold(0.0, f64::max),
            incoherence_ratio,
            max_ns_defect: step_stats.and_then(|s| s.max_ns_defect),
            retraction_error: step_stats.map_or(0.0, |s| s.retraction_error),
            contraction_ratio: dists.get(t + 1).map(|next| {
                if dists[t] > 0.0 {
                    next / dists[t]
                } else {
                    0.0
                }
            }),
            sigma_min_margin: sigma_min - (n as f64 - dists[t] * dists[t] / 2.0),
        });
    }
    Ok(TheoryReport { n, d, sigma, rows })
}

/// Outcome of the contraction check `d_{t+1} <= d_t / 2 + C`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractionReport {
    /// `d_F(X^t, Z)` for `t = 0..=t_max`.
    pub distances: Vec<f64>,
    /// `d_{t+1} - d_t / 2` per step.
    pub residuals: Vec<f64>,
    /// Smallest nonnegative constant making the inequality hold.
    pub constant: f64,
    /// `8 sigma sqrt(n d)`.
    pub threshold: f64,
    /// `max_t d_F(X^t, Z) / sqrt(n)`.
    pub max_dist_ratio: f64,
    pub pass: bool,
}

/// Fits the additive constant of `d_{t+1} <= d_t / 2 + C` over `t_max`
/// iterations. Passes when `C <= 8 sigma sqrt(n d)` and every iterate stays
/// within `d_F <= RIC_DISTANCE_RATIO sqrt(n)`.
pub fn check_lemma_error_contraction(
    instance: &SyncInstance,
    config: &SolverConfig,
    t_max: usize,
) -> Result<ContractionReport> {
    config.validate()?;
    let z = instance.truth()?;
    let obs = &instance.observation;
    let (n, d) = (obs.n(), obs.d());
    let (xs, _) = fixed_sequence(
        obs,
        &SolverConfig {
            step_stats: false,
            ..config.clone()
        },
        t_max,
    )?;
    let distances: Vec<f64> = xs
        .iter()
        .map(|x| dist_frob(x, z).map(|r| r.0))
        .collect::<Result<_>>()?;
    let residuals: Vec<f64> = distances.windows(2).map(|w| w[1] - 0.5 * w[0]).collect();
    let constant = residuals.iter().copied().fold(0.0, f64::max);
    let sigma = instance.sigma().unwrap_or(0.0);
    let threshold = 8.0 * sigma * ((n * d) as f64).sqrt();
    let max_dist_ratio = distances.iter().copied().fold(0.0, f64::max) / (n as f64).sqrt();
    let pass = constant <= threshold + 1e-8 && max_dist_ratio <= RIC_DISTANCE_RATIO;
    Ok(ContractionReport {
        distances,
        residuals,
        constant,
        threshold,
        max_dist_ratio,
        pass,
    })
}

/// True iff every recorded `||I - F_i^T F_i||_2` stayed below one. A trace
/// without step statistics gives `false`.
pub fn check_ns_region(trace: &IterationTrace) -> bool {
    let mut seen = false;
    for v in trace.records.iter().filter_map(|r| r.max_ns_defect) {
        if !(v < 1.0) {
            return false;
        }
        seen = true;
    }
    seen
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, SynthParams};
    use crate::solver::run;
    use nalgebra::dmatrix;

    fn instance(n: usize, d: usize, sigma: f64, p: f64, seed: u64) -> SyncInstance {
        generate(&SynthParams { n, d, sigma, p, seed }).unwrap()
    }

    #[test]
    fn noiseless_leave_one_out_is_identity() {
        let inst = instance(8, 2, 0.0, 0.7, 3);
        for l in 0..8 {
            let loo = leave_one_out_observation(&inst, l).unwrap();
            assert_eq!(loo.edges(), inst.observation.edges());
            for (e, _) in loo.edges().iter().enumerate() {
                assert!((loo.edge_block(e) - inst.observation.edge_block(e)).norm() < 1e-15);
            }
        }
    }

    #[test]
    fn leave_one_out_is_local() {
        let inst = instance(9, 3, 0.4, 0.8, 1);
        let z = inst.truth().unwrap();
        let l = 4;
        let loo = leave_one_out_observation(&inst, l).unwrap();
        for (e, &(i, j)) in loo.edges().iter().enumerate() {
            if i == l || j == l {
                let clean = z.block(i) * z.block(j).transpose();
                assert_eq!(loo.edge_block(e), clean);
            } else {
                assert_eq!(loo.edge_block(e), inst.observation.edge_block(e));
            }
        }
        assert!(leave_one_out_observation(&inst, 9).is_err());
    }

    #[test]
    fn leave_one_out_d1_hand_case() {
        let z = BlockStack::from_blocks(&[dmatrix![1.0], dmatrix![-1.0], dmatrix![1.0]]).unwrap();
        let obs = BlockObservation::from_edges(
            3,
            1,
            vec![
                (0, 1, dmatrix![-0.7]),
                (0, 2, dmatrix![1.3]),
                (1, 2, dmatrix![-1.1]),
            ],
        )
        .unwrap();
        let inst = SyncInstance {
            observation: obs,
            ground_truth: Some(z),
            params: None,
        };
        let loo = leave_one_out_observation(&inst, 1).unwrap();
        assert_eq!(loo.block(0, 1), dmatrix![-1.0]);
        assert_eq!(loo.block(1, 2), dmatrix![-1.0]);
        assert_eq!(loo.block(0, 2), dmatrix![1.3]);
    }

    #[test]
    fn requires_truth() {
        let mut inst = instance(5, 2, 0.1, 1.0, 0);
        inst.ground_truth = None;
        assert!(matches!(
            leave_one_out_observation(&inst, 0),
            Err(SyncError::TruthRequired)
        ));
        assert!(run_loo_suite(&inst, &SolverConfig::default(), 3).is_err());
    }

    #[test]
    fn noiseless_suite_has_no_leave_one_out_gap() {
        let inst = instance(15, 3, 0.0, 1.0, 2);
        let config = SolverConfig {
            retraction: Retraction::ExactSvd,
            ..SolverConfig::default()
        };
        let rep = run_loo_suite(&inst, &config, 5).unwrap();
        assert_eq!(rep.rows.len(), 6);
        for r in &rep.rows {
            assert!(r.max_loo_distance < 1e-12);
            assert_eq!(r.incoherence_ratio, 0.0);
            assert!(r.dist_ratio < 1e-9);
        }
        assert!(rep.sigma_min_bound_holds());
        let c = check_lemma_error_contraction(&inst, &config, 5).unwrap();
        assert!(c.constant <= 1e-8 && c.pass);

        // the auxiliary sequences reproduce the main one bit for bit
        let (main, _) = fixed_sequence(&inst.observation, &config, 5).unwrap();
        let loo = leave_one_out_observation(&inst, 7).unwrap();
        let (aux, _) = fixed_sequence(&loo, &config, 5).unwrap();
        assert_eq!(main, aux);
    }

    #[test]
    fn noisy_suite_quantities() {
        let inst = instance(40, 3, 0.1, 1.0, 6);
        let rep = run_loo_suite(&inst, &SolverConfig::default(), 8).unwrap();
        assert!(rep.loo_growth() <= 3.0);
        assert!(rep.max_incoherence_ratio() <= 2.0);
        assert!(rep.sigma_min_bound_holds());
        for r in &rep.rows {
            for v in [r.dist_ratio, r.max_node_deviation, r.max_loo_distance, r.retraction_error] {
                assert!(v.is_finite() && v >= 0.0);
            }
        }
        let csv = rep.to_long_csv();
        assert!(csv.starts_with("t,quantity,value\n"));
        assert!(csv.contains("\n8,incoherence_ratio,"));
        let par = run_loo_suite(
            &inst,
            &SolverConfig {
                parallel: true,
                ..SolverConfig::default()
            },
            8,
        )
        .unwrap();
        assert_eq!(par, rep);
    }

    #[test]
    fn contraction_fails_far_outside_regime() {
        let inst = instance(40, 3, 40f64.sqrt(), 1.0, 1);
        match check_lemma_error_contraction(&inst, &SolverConfig::default(), 10) {
            Ok(c) => assert!(!c.pass),
            Err(e) => assert!(e.is_numerical()),
        }
    }

    #[test]
    fn ns_region_from_traces() {
        let inst = instance(30, 3, 0.1, 1.0, 4);
        let out = run(&inst.observation, &SolverConfig::default(), None).unwrap();
        assert!(check_ns_region(&out.trace));
        let gpm = run(&inst.observation, &SolverConfig::gpm(), None).unwrap();
        assert!(!check_ns_region(&gpm.trace));
    }
}
