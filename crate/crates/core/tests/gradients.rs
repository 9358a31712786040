use fedrider::numkit::{grad_check, Tensor};
use fedrider::selftest::{random_graph_checks, PRIMITIVES};

#[test]
fn random_graphs_cover_every_primitive() {
    let report = random_graph_checks(140, 2024, 1e-4);
    assert!(report.graphs >= 100);
    for p in PRIMITIVES {
        assert!(report.covered.contains(p), "{p} not exercised");
    }
    assert!(report.failures.is_empty(), "{:?}", report.failures);
    assert!(report.max_rel_err <= 1e-4, "{:e}", report.max_rel_err);
}

#[test]
fn different_seeds_also_pass() {
    for seed in [1, 2, 3] {
        let report = random_graph_checks(35, seed, 1e-4);
        assert!(report.passed(1e-4), "seed {seed}: {:?}", report.failures);
    }
}

#[test]
fn gmm_style_loss_gradient() {
    // logdet and inverse of a weighted covariance, as in the mixture loss
    let x = Tensor::matrix(5, 2, vec![0.3, -0.2, 1.1, 0.4, -0.7, 0.9, 0.2, 0.1, -0.4, -1.0]).unwrap();
    let report = grad_check(
        |g, p| {
            let xt = g.transpose(p[0])?;
            let cov = g.matmul(xt, p[0])?;
            let cov = g.scale(cov, 0.2)?;
            let inv = g.inverse(cov)?;
            let ld = g.logdet(cov)?;
            let d = g.diag(inv)?;
            let r = g.recip(d)?;
            let s = g.sum(r)?;
            g.add(s, ld)
        },
        &[x],
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.passed, "{}", report.max_rel_err);
}
