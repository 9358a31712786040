use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fedrider::detect::{
    dagmm_features, gmm_energy, run_detector, DagmmVariant, DetectorConfig, DetectorKind, FlatUpdate,
};

fn batch(n: usize, dim: usize, seed: u64) -> Vec<FlatUpdate> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| FlatUpdate {
            client_id: i,
            vector: (0..dim).map(|_| rng.gen_range(-1e-2..1e-2) * (1.0 + i as f64 * 0.01)).collect(),
        })
        .collect()
}

fn small_cfg() -> DetectorConfig {
    DetectorConfig {
        epochs: 30,
        ae_epochs: 30,
        ..DetectorConfig::default()
    }
}

#[test]
fn permuting_the_batch_permutes_the_scores() {
    let b = batch(24, 40, 1);
    let mut perm: Vec<usize> = (0..b.len()).collect();
    perm.reverse();
    perm.swap(3, 11);
    let shuffled: Vec<FlatUpdate> = perm.iter().map(|&i| b[i].clone()).collect();
    for kind in DetectorKind::ALL {
        let a = run_detector(kind, &b, &small_cfg(), 5, 9).unwrap();
        let s = run_detector(kind, &shuffled, &small_cfg(), 5, 9).unwrap();
        for (pos, &orig) in perm.iter().enumerate() {
            assert_eq!(s.client_ids[pos], a.client_ids[orig]);
            let (x, y) = (s.scores[pos], a.scores[orig]);
            assert!((x - y).abs() <= 1e-9 * x.abs().max(y.abs()).max(1e-12), "{}: {x} vs {y}", kind.name());
        }
    }
}

#[test]
fn same_seed_same_scores() {
    let b = batch(20, 30, 2);
    for kind in DetectorKind::ALL {
        let a = run_detector(kind, &b, &small_cfg(), 1, 4).unwrap();
        let c = run_detector(kind, &b, &small_cfg(), 1, 4).unwrap();
        assert_eq!(a.scores, c.scores);
    }
}

#[test]
fn training_losses_finite_under_defaults() {
    let b = batch(30, 50, 3);
    for kind in DetectorKind::ALL {
        let out = run_detector(kind, &b, &DetectorConfig::default(), 1, 0).unwrap();
        assert_eq!(out.losses.len(), 200);
        assert!(out.losses.iter().all(|l| l.is_finite()));
        assert!(out.scores.iter().all(|s| s.is_finite()));
        assert_eq!(out.scores.len(), b.len());
    }
}

#[test]
fn uniform_memberships_reduce_to_plain_moments() {
    let b = batch(25, 30, 4);
    let cfg = DetectorConfig {
        uniform_memberships: true,
        ..small_cfg()
    };
    for variant in [DagmmVariant::Dagmm, DagmmVariant::StdDagmm] {
        let fit = dagmm_features(&b, &cfg, variant, 7).unwrap();
        let (n, d) = (b.len(), fit.feature_dim);
        let z = &fit.features;
        let mean: Vec<f64> = (0..d).map(|j| (0..n).map(|i| z[i * d + j]).sum::<f64>() / n as f64).collect();
        for k in 0..fit.gmm.components() {
            assert!((fit.gmm.phi[k] - 1.0 / fit.gmm.components() as f64).abs() < 1e-12);
            for j in 0..d {
                assert!((fit.gmm.mu[k][j] - mean[j]).abs() < 1e-10);
                for l in 0..d {
                    let cov = (0..n).map(|i| (z[i * d + j] - mean[j]) * (z[i * d + l] - mean[l])).sum::<f64>() / n as f64
                        + if j == l { cfg.cov_eps } else { 0.0 };
                    assert!((fit.gmm.sigma[k][j * d + l] - cov).abs() < 1e-10);
                }
            }
        }
        for i in 0..n {
            let e = gmm_energy(&z[i * d..(i + 1) * d], &fit.gmm).unwrap();
            assert!((e - fit.energies[i]).abs() <= 1e-9 * e.abs().max(1.0));
        }
    }
}
