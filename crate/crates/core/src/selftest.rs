//! Built-in correctness checks: finite-difference gradient checks over
//! randomized graphs, and brute-force oracles for the mixture energy, the
//! AUC and update clipping.

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::detect::{auc_from_labels, gmm_energy, GmmParams};
use crate::model::ModelParams;
use crate::numkit::{grad_check, Graph, NumError, Tensor, Var};
use crate::privacy::clip_update;
use crate::seeding;

/// Every differentiable primitive of the graph builder.
pub const PRIMITIVES: &[&str] = &[
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "add_row",
    "mul_col",
    "mul_scalar",
    "add_scalar",
    "scale",
    "shift",
    "tanh",
    "relu",
    "exp",
    "log",
    "recip",
    "sqrt",
    "softmax",
    "logsumexp",
    "sum",
    "mean",
    "sum_rows",
    "sum_cols",
    "transpose",
    "mse",
    "cross_entropy",
    "l2_norm",
    "l2_norm_rows",
    "cosine_rows",
    "inverse",
    "logdet",
    "column",
    "concat_cols",
    "diag",
];

const TEMPLATES: usize = 7;

/// Ops exercised by each template, in template order.
const TEMPLATE_OPS: [&[&str]; TEMPLATES] = [
    &["matmul", "add_row", "tanh", "mse"],
    &["add", "sub", "mul", "div", "exp", "shift", "sum"],
    &["mul_col", "mul_scalar", "add_scalar", "scale", "mean", "sum"],
    &["relu", "exp", "log", "recip", "sqrt", "shift", "sum"],
    &["softmax", "logsumexp", "sum_rows", "sum_cols", "transpose", "cross_entropy", "sum"],
    &["l2_norm", "l2_norm_rows", "cosine_rows", "sum"],
    &["matmul", "transpose", "add", "inverse", "logdet", "diag", "column", "concat_cols", "sum"],
];

#[derive(Debug, Clone)]
struct Template {
    kind: usize,
    rows: usize,
    consts: Vec<Tensor>,
    labels: Vec<usize>,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect()).expect("matching length")
}

impl Template {
    fn random(kind: usize, rng: &mut ChaCha8Rng) -> (Self, Vec<Tensor>) {
        let rows = rng.gen_range(2..=4);
        let cols = rng.gen_range(2..=4);
        let mut consts = Vec::new();
        let mut labels = Vec::new();
        let params = match kind {
            0 => {
                let inner = rng.gen_range(2..=4);
                consts.push(uniform(rng, rows, inner, -1.0, 1.0));
                consts.push(uniform(rng, rows, cols, -1.0, 1.0));
                vec![uniform(rng, inner, cols, -1.0, 1.0), uniform(rng, 1, cols, -0.5, 0.5)]
            }
            1 | 3 | 5 => {
                consts.push(uniform(rng, rows, cols, -1.0, 1.0));
                vec![uniform(rng, rows, cols, -1.0, 1.0), uniform(rng, rows, cols, -1.0, 1.0)]
            }
            2 => {
                consts.push(uniform(rng, rows, cols, -1.0, 1.0));
                vec![
                    uniform(rng, rows, cols, -1.0, 1.0),
                    uniform(rng, rows, 1, -1.0, 1.0),
                    uniform(rng, 1, 1, -1.0, 1.0),
                    uniform(rng, 1, 1, -1.0, 1.0),
                ]
            }
            4 => {
                labels = (0..rows).map(|_| rng.gen_range(0..cols)).collect();
                consts.push(uniform(rng, rows, cols, -1.0, 1.0));
                vec![uniform(rng, rows, cols, -2.0, 2.0), uniform(rng, cols, rows, -1.0, 1.0)]
            }
            _ => {
                let d = rows;
                consts.push(Tensor::identity(d));
                consts.push(uniform(rng, d, d, -1.0, 1.0));
                vec![uniform(rng, d, d, -1.0, 1.0), uniform(rng, d, 1, -1.0, 1.0)]
            }
        };
        (
            Self {
                kind,
                rows,
                consts,
                labels,
            },
            params,
        )
    }

    fn build(&self, g: &mut Graph, p: &[Var]) -> Result<Var, NumError> {
        let c: Vec<Var> = self.consts.iter().map(|t| g.constant(t.clone())).collect();
        match self.kind {
            0 => {
                let h = g.matmul(c[0], p[0])?;
                let h = g.add_row(h, p[1])?;
                let h = g.tanh(h)?;
                g.mse(h, c[1])
            }
            1 => {
                let s = g.add(p[0], c[0])?;
                let d = g.sub(s, p[1])?;
                let m = g.mul(d, p[0])?;
                let e = g.exp(p[1])?;
                let den = g.shift(e, 0.5)?;
                let q = g.div(m, den)?;
                g.sum(q)
            }
            2 => {
                let a = g.mul_col(p[0], p[1])?;
                let b = g.mul_scalar(a, p[2])?;
                let b = g.add_scalar(b, p[3])?;
                let b = g.mul(b, c[0])?;
                let b = g.scale(b, 1.7)?;
                let m = g.mean(b)?;
                let sq = g.mul(m, m)?;
                let t = g.sum(a)?;
                g.add(sq, t)
            }
            3 => {
                let r = g.relu(p[0])?;
                let e = g.exp(p[1])?;
                let sp = g.shift(e, 1.0)?;
                let l = g.log(sp)?;
                let inv = g.recip(sp)?;
                let rt = g.sqrt(sp)?;
                let a = g.mul(r, l)?;
                let b = g.add(a, inv)?;
                let b = g.mul(b, rt)?;
                let b = g.mul(b, c[0])?;
                g.sum(b)
            }
            4 => {
                let s = g.softmax(p[0])?;
                let s = g.mul(s, c[0])?;
                let rs = g.sum_rows(s)?;
                let cs = g.sum_cols(s)?;
                let lse = g.logsumexp(p[0])?;
                let t = g.transpose(p[1])?;
                let tp = g.mul(t, p[0])?;
                let ce = g.cross_entropy(tp, &self.labels)?;
                let a = g.sum(rs)?;
                let b = g.sum(cs)?;
                let l = g.sum(lse)?;
                let ab = g.mul(a, b)?;
                let x = g.add(ab, l)?;
                g.add(x, ce)
            }
            5 => {
                let n = g.l2_norm(p[0])?;
                let nr = g.l2_norm_rows(p[1])?;
                let cos = g.cosine_rows(p[0], p[1])?;
                let cos2 = g.cosine_rows(p[1], c[0])?;
                let a = g.mul(nr, cos)?;
                let a = g.add(a, cos2)?;
                let s = g.sum(a)?;
                g.add(s, n)
            }
            _ => {
                // p[0]·p[0]ᵀ + I is symmetric positive definite.
                let t = g.transpose(p[0])?;
                let mm = g.matmul(p[0], t)?;
                let a = g.add(mm, c[0])?;
                let inv = g.inverse(a)?;
                let ld = g.logdet(a)?;
                let w = g.mul(inv, c[1])?;
                let dg = g.diag(a)?;
                let col = g.column(inv, self.rows - 1)?;
                let cat = g.concat_cols(&[col, p[1]])?;
                let cat = g.mul(cat, cat)?;
                let s1 = g.sum(w)?;
                let s2 = g.sum(dg)?;
                let s3 = g.sum(cat)?;
                let s = g.add(s1, s2)?;
                let s = g.add(s, s3)?;
                g.add(s, ld)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradSuiteReport {
    pub graphs: usize,
    pub max_rel_err: f64,
    pub covered: BTreeSet<&'static str>,
    pub failures: Vec<String>,
}

impl GradSuiteReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.failures.is_empty() && self.max_rel_err <= tol && PRIMITIVES.iter().all(|p| self.covered.contains(p))
    }
}

/// Gradient-checks `count` random graphs. Graph `i` combines template
/// `i mod 7` with a second, randomly chosen template, so every primitive
/// is covered once `count ≥ 7`.
pub fn random_graph_checks(count: usize, seed: u64, tol: f64) -> GradSuiteReport {
    let mut rng = seeding::stream(seed, &[0x5e1f]);
    let mut report = GradSuiteReport {
        graphs: 0,
        max_rel_err: 0.0,
        covered: BTreeSet::new(),
        failures: Vec::new(),
    };
    for i in 0..count {
        let kinds = [i % TEMPLATES, rng.gen_range(0..TEMPLATES)];
        let mut parts = Vec::new();
        let mut params = Vec::new();
        for &k in &kinds {
            let (t, p) = Template::random(k, &mut rng);
            parts.push((t, params.len(), p.len()));
            params.extend(p);
        }
        let build = |g: &mut Graph, vars: &[Var]| -> Result<Var, NumError> {
            let mut total: Option<Var> = None;
            for (t, start, len) in &parts {
                let l = t.build(g, &vars[*start..start + len])?;
                total = Some(match total {
                    Some(acc) => g.add(acc, l)?,
                    None => l,
                });
            }
            Ok(total.expect("at least one template"))
        };
        match grad_check(build, &params, 1e-5, tol) {
            Ok(r) => {
                report.max_rel_err = report.max_rel_err.max(r.max_rel_err);
                if !r.passed {
                    report.failures.push(format!(
                        "graph {i} (templates {kinds:?}): max relative error {:e}",
                        r.max_rel_err
                    ));
                }
            }
            Err(e) => report.failures.push(format!("graph {i} (templates {kinds:?}): {e}")),
        }
        for &k in &kinds {
            report.covered.extend(TEMPLATE_OPS[k].iter().copied());
        }
        report.graphs += 1;
    }
    report
}

/// Determinant and inverse by Gauss-Jordan elimination with partial
/// pivoting.
fn det_and_inverse(a: &[f64], n: usize) -> (f64, Vec<f64>) {
    let mut m = a.to_vec();
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        inv[i * n + i] = 1.0;
    }
    let mut det = 1.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| m[x * n + col].abs().total_cmp(&m[y * n + col].abs()))
            .expect("non-empty range");
        if pivot != col {
            for j in 0..n {
                m.swap(col * n + j, pivot * n + j);
                inv.swap(col * n + j, pivot * n + j);
            }
            det = -det;
        }
        let p = m[col * n + col];
        det *= p;
        for j in 0..n {
            m[col * n + j] /= p;
            inv[col * n + j] /= p;
        }
        for r in 0..n {
            if r != col {
                let f = m[r * n + col];
                for j in 0..n {
                    m[r * n + j] -= f * m[col * n + j];
                    inv[r * n + j] -= f * inv[col * n + j];
                }
            }
        }
    }
    (det, inv)
}

/// `−ln Σ_k φ_k N(z; μ_k, Σ_k)` evaluated directly from the density.
pub fn brute_force_energy(z: &[f64], gmm: &GmmParams) -> f64 {
    let d = z.len();
    let mut density = 0.0;
    for k in 0..gmm.components() {
        let (det, inv) = det_and_inverse(&gmm.sigma[k], d);
        let diff: Vec<f64> = z.iter().zip(&gmm.mu[k]).map(|(a, b)| a - b).collect();
        let mut quad = 0.0;
        for a in 0..d {
            for b in 0..d {
                quad += diff[a] * inv[a * d + b] * diff[b];
            }
        }
        let norm = ((2.0 * std::f64::consts::PI).powi(d as i32) * det).sqrt();
        density += gmm.phi[k] * (-0.5 * quad).exp() / norm;
    }
    -density.ln()
}

/// A random mixture with K ≤ 4 components in d ≤ 6 dimensions and
/// covariances `B·Bᵀ + 0.3·I`.
pub fn random_mixture(rng: &mut impl Rng) -> GmmParams {
    let k = rng.gen_range(1..=4);
    let d = rng.gen_range(1..=6);
    let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.1..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let phi = raw.iter().map(|w| w / total).collect();
    let mu = (0..k).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let sigma = (0..k)
        .map(|_| {
            let b: Vec<f64> = (0..d * d).map(|_| rng.gen_range(-0.7..0.7)).collect();
            let mut s = vec![0.0; d * d];
            for i in 0..d {
                for j in 0..d {
                    s[i * d + j] = (0..d).map(|t| b[i * d + t] * b[j * d + t]).sum::<f64>();
                }
                s[i * d + i] += 0.3;
            }
            s
        })
        .collect();
    GmmParams { phi, mu, sigma }
}

/// Largest relative energy error over `trials` random mixtures, each
/// probed at a few points near its means.
pub fn gmm_oracle_max_err(trials: usize, seed: u64) -> Result<f64, String> {
    let mut rng = seeding::stream(seed, &[0x6a11]);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let gmm = random_mixture(&mut rng);
        for _ in 0..4 {
            let c = rng.gen_range(0..gmm.components());
            let z: Vec<f64> = gmm.mu[c].iter().map(|m| m + rng.gen_range(-1.0..1.0)).collect();
            let fast = gmm_energy(&z, &gmm).map_err(|e| e.to_string())?;
            let slow = brute_force_energy(&z, &gmm);
            worst = worst.max((fast - slow).abs() / slow.abs().max(1e-300));
        }
    }
    Ok(worst)
}

/// `(2·wins + ties) / (2·P·N)` by enumerating every positive/negative pair.
pub fn brute_force_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Number of random score sets where the fast AUC disagrees with pairwise
/// enumeration. Scores are drawn from a small grid so ties are common.
pub fn auc_oracle_mismatches(trials: usize, seed: u64) -> usize {
    let mut rng = seeding::stream(seed, &[0xa0c]);
    let mut bad = 0;
    for _ in 0..trials {
        let n = rng.gen_range(2..40);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
        labels[0] = true;
        labels[1] = false;
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..8u8)) * 0.25).collect();
        match auc_from_labels(&scores, &labels) {
            Ok(a) if a == brute_force_auc(&scores, &labels) => {}
            _ => bad += 1,
        }
    }
    bad
}

/// Largest `‖clip(g)‖ − C` over `trials` random vectors with norms spread
/// over `[0, 10C]`.
pub fn clip_max_excess(trials: usize, clip_bound: f64, seed: u64) -> f64 {
    let mut rng = seeding::stream(seed, &[0xc11b]);
    let mut worst = f64::NEG_INFINITY;
    for t in 0..trials {
        let n = rng.gen_range(1..64);
        let dir: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        let target = 10.0 * clip_bound * t as f64 / trials as f64;
        let g = ModelParams::new(vec![vec![n]], dir.iter().map(|v| v / norm * target).collect())
            .expect("matching length");
        worst = worst.max(clip_update(&g, clip_bound).l2_norm() - clip_bound);
    }
    worst
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// The full suite run by `fedrider selftest`.
pub fn run_all(seed: u64) -> Vec<CheckOutcome> {
    let grads = random_graph_checks(140, seed, 1e-4);
    let missing: Vec<&str> = PRIMITIVES.iter().filter(|p| !grads.covered.contains(*p)).copied().collect();
    let mut out = vec![CheckOutcome {
        name: "gradients",
        passed: grads.passed(1e-4),
        detail: format!(
            "{} graphs, {} primitives, max relative error {:.2e}{}{}",
            grads.graphs,
            grads.covered.len(),
            grads.max_rel_err,
            if missing.is_empty() { String::new() } else { format!(", uncovered {missing:?}") },
            grads.failures.first().map(|f| format!(", first failure: {f}")).unwrap_or_default()
        ),
    }];
    let standard = GmmParams {
        phi: vec![1.0],
        mu: vec![vec![0.0]],
        sigma: vec![vec![1.0]],
    };
    let closed = gmm_energy(&[0.0], &standard).map(|e| (e - 0.5 * (2.0 * std::f64::consts::PI).ln()).abs());
    out.push(match (gmm_oracle_max_err(200, seed), closed) {
        (Ok(err), Ok(c)) => CheckOutcome {
            name: "gmm_energy",
            passed: err <= 1e-8 && c <= 1e-15,
            detail: format!("max relative error {err:.2e}, standard normal error {c:.2e}"),
        },
        (Err(e), _) => CheckOutcome {
            name: "gmm_energy",
            passed: false,
            detail: e,
        },
        (_, Err(e)) => CheckOutcome {
            name: "gmm_energy",
            passed: false,
            detail: e.to_string(),
        },
    });
    let bad = auc_oracle_mismatches(500, seed);
    out.push(CheckOutcome {
        name: "auc",
        passed: bad == 0,
        detail: format!("{bad} of 500 score sets disagree with pairwise enumeration"),
    });
    let excess = clip_max_excess(10_000, 1.0, seed);
    out.push(CheckOutcome {
        name: "clipping",
        passed: excess <= 1e-12,
        detail: format!("max norm excess over C {excess:.2e}"),
    });
    out
}
