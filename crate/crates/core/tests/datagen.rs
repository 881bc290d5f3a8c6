use nalgebra::SymmetricEigen;

use orthosync::datagen::{generate, save_instance, load_instance, SynthParams};

fn params(n: usize, d: usize, sigma: f64, p: f64, seed: u64) -> SynthParams {
    SynthParams { n, d, sigma, p, seed }
}

#[test]
fn noiseless_full_observation_is_rank_d() {
    let (n, d) = (30, 3);
    let inst = generate(&params(n, d, 0.0, 1.0, 4)).unwrap();
    let a = inst.observation.to_dense();
    let z = inst.truth().unwrap().to_matrix();
    // A = Z Z^T - I with the zero diagonal
    let expect = &z * z.transpose() - nalgebra::DMatrix::identity(n * d, n * d);
    assert!((&a - expect).norm() < 1e-10);
    let mut eig: Vec<f64> = SymmetricEigen::new(a).eigenvalues.iter().copied().collect();
    eig.sort_by(|x, y| y.partial_cmp(x).unwrap());
    for k in 0..d {
        assert!((eig[k] - (n as f64 - 1.0)).abs() < 1e-9);
    }
    assert!((eig[d] + 1.0).abs() < 1e-9);
}

#[test]
fn sampling_rate_and_symmetry() {
    let inst = generate(&params(200, 2, 0.3, 0.3, 9)).unwrap();
    let obs = &inst.observation;
    let pairs = 200.0 * 199.0 / 2.0;
    let frac = obs.num_edges() as f64 / pairs;
    // binomial standard error is about 0.0024
    assert!((frac - 0.3).abs() < 0.015, "{frac}");
    assert_eq!(obs.observed_fraction(), frac);
    let dense = obs.to_dense();
    assert!((&dense - dense.transpose()).norm() == 0.0);
    for &(i, j) in obs.edges() {
        assert!(i < j);
        assert_eq!(obs.block(j, i), obs.block(i, j).transpose());
    }
}

#[test]
fn noise_does_not_change_the_mask() {
    let a = generate(&params(50, 3, 0.0, 0.4, 2)).unwrap();
    let b = generate(&params(50, 3, 0.7, 0.4, 2)).unwrap();
    assert_eq!(a.observation.edges(), b.observation.edges());
    assert_eq!(a.ground_truth, b.ground_truth);
}

#[test]
fn instance_round_trips_through_disk() {
    let tmp = tempfile::tempdir().unwrap();
    let inst = generate(&params(25, 4, 0.1, 0.5, 1)).unwrap();
    save_instance(tmp.path(), &inst).unwrap();
    let back = load_instance(tmp.path()).unwrap();
    assert_eq!(back.observation.edges(), inst.observation.edges());
    assert_eq!(back.observation.raw_blocks(), inst.observation.raw_blocks());
    assert_eq!(back.ground_truth, inst.ground_truth);
    assert_eq!(back.sigma(), Some(0.1));
}
