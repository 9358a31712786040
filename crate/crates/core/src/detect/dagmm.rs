//! DAGMM and its STD-augmented variant.
//!
//! A compression net maps each update to a small embedding `z_c` plus
//! reconstruction features `z_r`; an estimation net assigns soft mixture
//! memberships; the mixture is fit from those memberships inside the
//! training graph so the whole pipeline trains end to end.

use log::debug;
use serde::{Deserialize, Serialize};

use super::gmm::GmmParams;
use super::network::{CompressionNet, EstimationNet};
use super::{scale_inputs, stack, DetectError, DetectorConfig, DetectorKind, DetectorOutput, FlatUpdate};
use crate::fedsim::population_std;
use crate::numkit::{Adam, Graph, NumError, Tensor, Var, NORM_GUARD};
use crate::seeding;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DagmmVariant {
    /// `z_r = [relative distance, cosine similarity]`.
    Dagmm,
    /// `z_r = [relative distance, cosine similarity, input STD]`.
    StdDagmm,
}

impl DagmmVariant {
    pub fn reconstruction_features(self) -> usize {
        match self {
            DagmmVariant::Dagmm => 2,
            DagmmVariant::StdDagmm => 3,
        }
    }

    fn kind(self) -> DetectorKind {
        match self {
            DagmmVariant::Dagmm => DetectorKind::Dagmm,
            DagmmVariant::StdDagmm => DetectorKind::Stddagmm,
        }
    }
}

/// A trained DAGMM evaluated on its own batch.
#[derive(Debug, Clone, PartialEq)]
pub struct DagmmFit {
    pub variant: DagmmVariant,
    /// `n×len(z)` row-major feature matrix `[z_c, z_r]`.
    pub features: Vec<f64>,
    pub feature_dim: usize,
    /// `n×K` row-major memberships.
    pub memberships: Vec<f64>,
    pub gmm: GmmParams,
    pub energies: Vec<f64>,
    pub losses: Vec<f64>,
}

struct Setup {
    comp: CompressionNet,
    est: EstimationNet,
    input: Tensor,
    n: usize,
    /// `1/‖x_i‖`, or 1 where the norm is below the guard.
    inv_norms: Tensor,
    stds: Option<Tensor>,
}

struct Forward {
    features: Var,
    memberships: Var,
    loss: Var,
}

impl Setup {
    fn new(batch: &[FlatUpdate], cfg: &DetectorConfig, variant: DagmmVariant) -> Result<Self, DetectError> {
        cfg.validate()?;
        let (mut x, n, d) = stack(batch, cfg.components + 1)?;
        scale_inputs(&mut x, cfg.input_scaling);
        // STD of the vectors as the networks see them (after batch scaling).
        let stds = match variant {
            DagmmVariant::Dagmm => None,
            DagmmVariant::StdDagmm => {
                let s: Vec<f64> = x.chunks(d).map(population_std).collect();
                Some(Tensor::matrix(n, 1, s)?)
            }
        };
        let inv_norms = (0..n)
            .map(|i| {
                let norm = x[i * d..(i + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm < NORM_GUARD {
                    1.0
                } else {
                    1.0 / norm
                }
            })
            .collect();
        let comp = CompressionNet::new(d, cfg.hidden, cfg.latent)?;
        let est = EstimationNet {
            input: cfg.latent + variant.reconstruction_features(),
            hidden: cfg.estimation_hidden,
            components: cfg.components,
        };
        Ok(Self {
            comp,
            est,
            input: Tensor::matrix(n, d, x)?,
            n,
            inv_norms: Tensor::matrix(n, 1, inv_norms)?,
            stds,
        })
    }

    fn forward(&self, g: &mut Graph, p: &[Var], cfg: &DetectorConfig) -> Result<Forward, NumError> {
        let n = self.n;
        let x = g.constant(self.input.clone());
        let out = self.comp.forward(g, &p[..8], x)?;

        let diff = g.sub(x, out.reconstruction)?;
        let dist = g.l2_norm_rows(diff)?;
        let inv = g.constant(self.inv_norms.clone());
        let rel = g.mul(dist, inv)?;
        let cos = g.cosine_rows(x, out.reconstruction)?;
        let mut cols = vec![rel, cos];
        if let Some(s) = &self.stds {
            cols.push(g.constant(s.clone()));
        }
        let mut zr = g.concat_cols(&cols)?;
        if cfg.standardize_zr {
            zr = standardize_columns(g, zr)?;
        }
        let z = g.concat_cols(&[out.latent, zr])?;

        let k = cfg.components;
        let gamma = if cfg.uniform_memberships {
            g.constant(Tensor::matrix(n, k, vec![1.0 / k as f64; n * k])?)
        } else {
            self.est.forward(g, &p[8..], z)?
        };

        let dim = g.value(z).dims2().1;
        let eps_i = g.constant(scaled_identity(dim, cfg.cov_eps));
        let mut log_probs = Vec::with_capacity(k);
        let mut penalty = None;
        for c in 0..k {
            let gk = g.column(gamma, c)?;
            let nk = g.sum(gk)?;
            let inv_nk = g.recip(nk)?;
            let weighted = g.mul_col(z, gk)?;
            let mu = g.sum_rows(weighted)?;
            let mu = g.mul_scalar(mu, inv_nk)?;
            let neg_mu = g.scale(mu, -1.0)?;
            let dz = g.add_row(z, neg_mu)?;
            let wd = g.mul_col(dz, gk)?;
            let wdt = g.transpose(wd)?;
            let cov = g.matmul(wdt, dz)?;
            let cov = g.mul_scalar(cov, inv_nk)?;
            let cov = g.add(cov, eps_i)?;
            let prec = g.inverse(cov)?;
            let log_det = g.logdet(cov)?;
            let t = g.matmul(dz, prec)?;
            let t = g.mul(t, dz)?;
            let quad = g.sum_cols(t)?;
            let quad = g.scale(quad, -0.5)?;
            // log φ_k − ½ log det Σ_k − ½ d log 2π
            let log_phi = g.log(nk)?;
            let half_ld = g.scale(log_det, -0.5)?;
            let offset = g.add(log_phi, half_ld)?;
            let offset = g.shift(offset, -(n as f64).ln() - dim as f64 * HALF_LN_2PI)?;
            log_probs.push(g.add_scalar(quad, offset)?);

            let d = g.diag(cov)?;
            let d = g.recip(d)?;
            let d = g.sum(d)?;
            penalty = Some(match penalty {
                None => d,
                Some(acc) => g.add(acc, d)?,
            });
        }
        let stacked = g.concat_cols(&log_probs)?;
        let lse = g.logsumexp(stacked)?;
        let mean_lse = g.mean(lse)?;
        let energy_term = g.scale(mean_lse, -cfg.lambda_energy)?;
        let recon = g.mse(out.reconstruction, x)?;
        let penalty = g.scale(penalty.expect("at least one component"), cfg.lambda_cov)?;
        let loss = g.add(recon, energy_term)?;
        let loss = g.add(loss, penalty)?;
        Ok(Forward {
            features: z,
            memberships: gamma,
            loss,
        })
    }
}

fn scaled_identity(d: usize, eps: f64) -> Tensor {
    let mut t = Tensor::identity(d);
    t.values_mut().iter_mut().for_each(|v| *v *= eps);
    t
}

/// Column-wise `(v − mean)/std` with the batch statistics treated as
/// constants. Constant columns are centred only.
fn standardize_columns(g: &mut Graph, a: Var) -> Result<Var, NumError> {
    let t = g.value(a);
    let (r, c) = t.dims2();
    let mut scale = vec![0.0; c * c];
    let mut offset = vec![0.0; c];
    for j in 0..c {
        let col: Vec<f64> = (0..r).map(|i| t.values()[i * c + j]).collect();
        let m = col.iter().sum::<f64>() / r as f64;
        let s = population_std(&col);
        let s = if s > 1e-12 { s } else { 1.0 };
        scale[j * c + j] = 1.0 / s;
        offset[j] = -m / s;
    }
    let scale = g.constant(Tensor::matrix(c, c, scale)?);
    let offset = g.constant(Tensor::matrix(1, c, offset)?);
    let scaled = g.matmul(a, scale)?;
    g.add_row(scaled, offset)
}

fn collapse(epoch: usize, e: NumError) -> DetectError {
    match e {
        NumError::Singular { .. } | NumError::NotPositiveDefinite { .. } => DetectError::CovarianceCollapse {
            epoch,
            detail: e.to_string(),
        },
        NumError::NonFinite { .. } => DetectError::NonFiniteLoss { epoch },
        other => DetectError::Num(other),
    }
}

/// Trains a DAGMM of the given variant on `batch` and evaluates it there.
pub fn dagmm_features(
    batch: &[FlatUpdate],
    cfg: &DetectorConfig,
    variant: DagmmVariant,
    seed: u64,
) -> Result<DagmmFit, DetectError> {
    let setup = Setup::new(batch, cfg, variant)?;
    let mut rng = seeding::stream(seed, &[seeding::DETECTOR, variant.reconstruction_features() as u64]);
    let mut params = setup.comp.init(&mut rng);
    params.extend(setup.est.init(&mut rng));
    let mut adam = Adam::new(cfg.learning_rate);
    let mut losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
        let f = setup.forward(&mut g, &vars, cfg).map_err(|e| collapse(epoch, e))?;
        let value = g.value(f.loss).item();
        if !value.is_finite() {
            return Err(DetectError::NonFiniteLoss { epoch });
        }
        losses.push(value);
        let grads = g.backward(f.loss)?;
        let gs: Vec<Tensor> = vars
            .iter()
            .zip(&params)
            .map(|(v, p)| grads.get_or_zeros(*v, p.shape()))
            .collect();
        adam.step(&mut params, &gs)?;
    }
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        debug!("{:?}: loss {first:.6} -> {last:.6} over {} epochs", variant, losses.len());
    }

    let mut g = Graph::new();
    let vars: Vec<Var> = params.into_iter().map(|p| g.constant(p)).collect();
    let f = setup.forward(&mut g, &vars, cfg).map_err(|e| collapse(cfg.epochs, e))?;
    let z = g.value(f.features);
    let (n, dim) = z.dims2();
    let features = z.values().to_vec();
    let memberships = g.value(f.memberships).values().to_vec();
    let gmm = GmmParams::from_memberships(&features, n, dim, &memberships, cfg.components, cfg.cov_eps);
    let prepared = gmm.prepare().map_err(|e| DetectError::CovarianceCollapse {
        epoch: cfg.epochs,
        detail: e.to_string(),
    })?;
    let energies: Vec<f64> = features.chunks(dim).map(|row| prepared.energy(row)).collect();
    if energies.iter().any(|e| !e.is_finite()) {
        return Err(DetectError::NonFiniteLoss { epoch: cfg.epochs });
    }
    Ok(DagmmFit {
        variant,
        features,
        feature_dim: dim,
        memberships,
        gmm,
        energies,
        losses,
    })
}

fn score(batch: &[FlatUpdate], cfg: &DetectorConfig, variant: DagmmVariant, seed: u64) -> Result<DetectorOutput, DetectError> {
    let fit = dagmm_features(batch, cfg, variant, seed)?;
    Ok(DetectorOutput {
        kind: variant.kind(),
        round: 0,
        client_ids: batch.iter().map(|u| u.client_id).collect(),
        scores: fit.energies,
        losses: fit.losses,
    })
}

/// Per-client energy under a DAGMM trained on this batch.
pub fn dagmm_score(batch: &[FlatUpdate], cfg: &DetectorConfig, seed: u64) -> Result<DetectorOutput, DetectError> {
    score(batch, cfg, DagmmVariant::Dagmm, seed)
}

/// As [`dagmm_score`], with each input's standard deviation appended to
/// the reconstruction features.
pub fn stddagmm_score(batch: &[FlatUpdate], cfg: &DetectorConfig, seed: u64) -> Result<DetectorOutput, DetectError> {
    score(batch, cfg, DagmmVariant::StdDagmm, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn honest_batch(n: usize, d: usize, seed: u64) -> Vec<FlatUpdate> {
        let mut rng = seeding::stream(seed, &[]);
        let base: Vec<f64> = (0..d).map(|_| rng.gen_range(-1e-3..1e-3)).collect();
        let noise = Normal::new(0.0, 3e-4).unwrap();
        (0..n)
            .map(|client_id| FlatUpdate {
                client_id,
                vector: base.iter().map(|b| b + noise.sample(&mut rng)).collect(),
            })
            .collect()
    }

    fn small_cfg(epochs: usize) -> DetectorConfig {
        DetectorConfig {
            hidden: 8,
            latent: 2,
            estimation_hidden: 6,
            components: 2,
            epochs,
            ..DetectorConfig::default()
        }
    }

    #[test]
    fn feature_width_depends_on_variant() {
        let b = honest_batch(12, 20, 1);
        let cfg = small_cfg(2);
        let plain = dagmm_features(&b, &cfg, DagmmVariant::Dagmm, 0).unwrap();
        let with_std = dagmm_features(&b, &cfg, DagmmVariant::StdDagmm, 0).unwrap();
        assert_eq!(plain.feature_dim, cfg.latent + 2);
        assert_eq!(with_std.feature_dim, cfg.latent + 3);
    }

    #[test]
    fn memberships_and_weights_are_normalized() {
        let b = honest_batch(15, 20, 2);
        let fit = dagmm_features(&b, &small_cfg(20), DagmmVariant::StdDagmm, 3).unwrap();
        for row in fit.memberships.chunks(2) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!((fit.gmm.phi.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(fit.losses.iter().all(|l| l.is_finite()));
        assert_eq!(fit.energies.len(), 15);
    }

    #[test]
    fn duplicate_rows_get_identical_scores() {
        let mut b = honest_batch(10, 20, 3);
        b[7].vector = b[2].vector.clone();
        let out = stddagmm_score(&b, &small_cfg(30), 4).unwrap();
        assert_eq!(out.scores[2], out.scores[7]);
    }

    #[test]
    fn too_small_batch_rejected() {
        let b = honest_batch(2, 20, 4);
        assert!(matches!(
            dagmm_score(&b, &small_cfg(1), 0),
            Err(DetectError::BatchTooSmall { needed: 3, found: 2 })
        ));
    }

    #[test]
    fn scaling_one_vector_changes_only_its_std_feature_standing() {
        let mut b = honest_batch(20, 30, 5);
        let stds: Vec<f64> = b.iter().map(|u| population_std(&u.vector)).collect();
        let mut sorted = stds.clone();
        sorted.sort_by(|a, c| a.partial_cmp(c).unwrap());
        let median = sorted[10];
        let factor = median / stds[0];
        b[0].vector.iter_mut().for_each(|v| *v *= factor);
        let out = stddagmm_score(&b, &small_cfg(10), 6).unwrap();
        assert_eq!(out.scores.len(), 20);
        assert!(out.scores.iter().all(|s| s.is_finite()));
    }
}
