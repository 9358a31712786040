use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fedrider::detect::{gmm_energy, GmmParams};

/// Mixture density evaluated with dense LU determinant and inverse.
fn dense_energy(z: &[f64], gmm: &GmmParams) -> f64 {
    let d = z.len();
    let zv = DVector::from_column_slice(z);
    let mut density = 0.0;
    for k in 0..gmm.components() {
        let sigma = DMatrix::from_row_slice(d, d, &gmm.sigma[k]);
        let inv = sigma.clone().try_inverse().expect("invertible");
        let diff = &zv - DVector::from_column_slice(&gmm.mu[k]);
        let quad = (diff.transpose() * inv * &diff)[(0, 0)];
        let det = (sigma * (2.0 * std::f64::consts::PI)).determinant();
        density += gmm.phi[k] * (-0.5 * quad).exp() / det.sqrt();
    }
    -density.ln()
}

fn random_gmm(rng: &mut ChaCha8Rng, k: usize, d: usize) -> GmmParams {
    let w: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..1.0)).collect();
    let total: f64 = w.iter().sum();
    let sigma = (0..k)
        .map(|_| {
            let b = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
            let s = &b * b.transpose() + DMatrix::identity(d, d) * 0.2;
            s.transpose().as_slice().to_vec()
        })
        .collect();
    GmmParams {
        phi: w.iter().map(|x| x / total).collect(),
        mu: (0..k).map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect(),
        sigma,
    }
}

#[test]
fn energy_matches_dense_density_on_random_mixtures() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for k in 1..=4 {
        for d in 1..=6 {
            for _ in 0..5 {
                let gmm = random_gmm(&mut rng, k, d);
                for _ in 0..100 {
                    let z: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
                    let e = gmm_energy(&z, &gmm).unwrap();
                    let oracle = dense_energy(&z, &gmm);
                    worst = worst.max((e - oracle).abs() / oracle.abs());
                }
            }
        }
    }
    assert!(worst <= 1e-8, "max relative error {worst:e}");
}

#[test]
fn standard_normal_at_mean() {
    let gmm = GmmParams {
        phi: vec![1.0],
        mu: vec![vec![0.0]],
        sigma: vec![vec![1.0]],
    };
    let e = gmm_energy(&[0.0], &gmm).unwrap();
    assert!((e - 0.918_938_533_204_672_7).abs() < 1e-14, "{e}");
}

#[test]
fn dominant_mean_minimizes_energy_on_grid() {
    let gmm = GmmParams {
        phi: vec![0.9, 0.1],
        mu: vec![vec![0.5, -0.5], vec![3.0, 3.0]],
        sigma: vec![vec![0.5, 0.1, 0.1, 0.4], vec![1.0, 0.0, 0.0, 1.0]],
    };
    let at_mode = gmm_energy(&[0.5, -0.5], &gmm).unwrap();
    for i in -10..=10 {
        for j in -10..=10 {
            let z = [0.5 + i as f64 * 0.3, -0.5 + j as f64 * 0.3];
            assert!(gmm_energy(&z, &gmm).unwrap() >= at_mode - 1e-12);
        }
    }
}

#[test]
fn non_pd_covariance_names_component() {
    let gmm = GmmParams {
        phi: vec![0.5, 0.5],
        mu: vec![vec![0.0, 0.0], vec![1.0, 1.0]],
        sigma: vec![vec![1.0, 0.0, 0.0, 1.0], vec![1.0, 2.0, 2.0, 1.0]],
    };
    let err = gmm_energy(&[0.0, 0.0], &gmm).unwrap_err();
    assert!(err.to_string().contains('1'), "{err}");
}

proptest! {
    #[test]
    fn energy_matches_dense_density(seed in any::<u64>(), k in 1usize..=4, d in 1usize..=6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gmm = random_gmm(&mut rng, k, d);
        let z: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let e = gmm_energy(&z, &gmm).unwrap();
        let oracle = dense_energy(&z, &gmm);
        prop_assert!((e - oracle).abs() <= 1e-8 * oracle.abs());
    }
}
