//! Per-round free-rider scoring.
//!
//! Detectors see one round's submissions and nothing else. Each is trained
//! from scratch on that batch and then scores every vector in it.

mod autoencoder;
mod dagmm;
mod gmm;
mod metrics;
mod network;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use autoencoder::autoencoder_score;
pub use dagmm::{dagmm_features, DagmmFit, dagmm_score, stddagmm_score, DagmmVariant};
pub use gmm::{gmm_energy, GmmParams, PreparedGmm};
pub use metrics::{auc, auc_from_labels, rank_report, RankReport};

use crate::fedsim::ClientUpdate;
use crate::numkit::NumError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DetectError {
    #[error("batch of {found} updates is too small (need at least {needed})")]
    BatchTooSmall { needed: usize, found: usize },
    #[error("updates in one batch have different lengths ({first} vs {other})")]
    RaggedBatch { first: usize, other: usize },
    #[error("degenerate architecture: {0}")]
    Architecture(String),
    #[error("covariance of component {component} is not positive definite")]
    NotPositiveDefinite { component: usize },
    #[error("covariance collapse at epoch {epoch}: {detail}")]
    CovarianceCollapse { epoch: usize, detail: String },
    #[error("non-finite training loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("invalid mixture: {0}")]
    InvalidGmm(String),
    #[error("vector of length {0} is too short for a standard deviation")]
    TooShort(usize),
    #[error("AUC needs at least one free rider and one honest client (got {positives} and {negatives})")]
    OneClass { positives: usize, negatives: usize },
    #[error("score/label length mismatch: {scores} scores, {labels} labels")]
    LabelMismatch { scores: usize, labels: usize },
    #[error(transparent)]
    Num(#[from] NumError),
}

/// One client update as a single row-major vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatUpdate {
    pub client_id: usize,
    pub vector: Vec<f64>,
}

/// Row-major concatenation of every layer, in the model's layer order.
pub fn flatten(update: &ClientUpdate) -> FlatUpdate {
    FlatUpdate {
        client_id: update.client_id,
        vector: update.grad.values().to_vec(),
    }
}

/// Population standard deviation (divides by N).
pub fn std_stat(v: &[f64]) -> Result<f64, DetectError> {
    if v.len() < 2 {
        return Err(DetectError::TooShort(v.len()));
    }
    Ok(crate::fedsim::population_std(v))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    Autoencoder,
    Dagmm,
    Stddagmm,
}

impl DetectorKind {
    pub const ALL: [DetectorKind; 3] = [DetectorKind::Autoencoder, DetectorKind::Dagmm, DetectorKind::Stddagmm];

    pub fn name(self) -> &'static str {
        match self {
            DetectorKind::Autoencoder => "autoencoder",
            DetectorKind::Dagmm => "dagmm",
            DetectorKind::Stddagmm => "stddagmm",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// How flattened updates are rescaled before entering the networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputScaling {
    None,
    /// Divide the whole batch by its root-mean-square entry.
    BatchRms,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub hidden: usize,
    pub latent: usize,
    pub estimation_hidden: usize,
    pub components: usize,
    pub lambda_energy: f64,
    pub lambda_cov: f64,
    pub epochs: usize,
    pub ae_epochs: usize,
    pub learning_rate: f64,
    pub cov_eps: f64,
    /// Standardize each reconstruction feature across the batch before the
    /// estimation net (batch statistics treated as constants).
    pub standardize_zr: bool,
    pub input_scaling: InputScaling,
    /// Replace the estimation net's output with uniform memberships 1/K.
    pub uniform_memberships: bool,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            latent: 4,
            estimation_hidden: 16,
            components: 4,
            lambda_energy: 0.1,
            lambda_cov: 0.005,
            epochs: 200,
            ae_epochs: 200,
            learning_rate: 1e-3,
            cov_eps: 1e-6,
            standardize_zr: false,
            input_scaling: InputScaling::BatchRms,
            uniform_memberships: false,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<(), DetectError> {
        if self.hidden == 0 || self.latent == 0 || self.estimation_hidden == 0 {
            return Err(DetectError::Architecture("layer widths must be positive".into()));
        }
        if self.components == 0 {
            return Err(DetectError::Architecture("need at least one mixture component".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.cov_eps >= 0.0) {
            return Err(DetectError::Architecture("learning_rate must be positive, cov_eps non-negative".into()));
        }
        if !(self.lambda_energy >= 0.0) || !(self.lambda_cov >= 0.0) {
            return Err(DetectError::Architecture("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Scores from one detector on one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorOutput {
    pub kind: DetectorKind,
    pub round: usize,
    pub client_ids: Vec<usize>,
    /// Reconstruction error (autoencoder) or energy (DAGMM variants).
    pub scores: Vec<f64>,
    /// Training loss after every epoch.
    pub losses: Vec<f64>,
}

impl DetectorOutput {
    pub fn score_of(&self, client_id: usize) -> Option<f64> {
        self.client_ids
            .iter()
            .position(|&c| c == client_id)
            .map(|i| self.scores[i])
    }
}

/// Stacks a batch into an n×D matrix, checking lengths.
pub(crate) fn stack(batch: &[FlatUpdate], min: usize) -> Result<(Vec<f64>, usize, usize), DetectError> {
    if batch.len() < min {
        return Err(DetectError::BatchTooSmall {
            needed: min,
            found: batch.len(),
        });
    }
    let d = batch[0].vector.len();
    let mut x = Vec::with_capacity(batch.len() * d);
    for u in batch {
        if u.vector.len() != d {
            return Err(DetectError::RaggedBatch {
                first: d,
                other: u.vector.len(),
            });
        }
        x.extend_from_slice(&u.vector);
    }
    Ok((x, batch.len(), d))
}

/// Applies the configured input scaling in place; returns the divisor.
pub(crate) fn scale_inputs(x: &mut [f64], scaling: InputScaling) -> f64 {
    let divisor = match scaling {
        InputScaling::None => return 1.0,
        InputScaling::BatchRms => (x.iter().map(|a| a * a).sum::<f64>() / x.len() as f64).sqrt(),
    };
    if divisor > 0.0 {
        x.iter_mut().for_each(|v| *v /= divisor);
        divisor
    } else {
        1.0
    }
}

/// Runs one detector on a batch.
pub fn run_detector(
    kind: DetectorKind,
    batch: &[FlatUpdate],
    cfg: &DetectorConfig,
    round: usize,
    seed: u64,
) -> Result<DetectorOutput, DetectError> {
    let mut out = match kind {
        DetectorKind::Autoencoder => autoencoder_score(batch, cfg, seed)?,
        DetectorKind::Dagmm => dagmm_score(batch, cfg, seed)?,
        DetectorKind::Stddagmm => stddagmm_score(batch, cfg, seed)?,
    };
    out.round = round;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelParams;
    use crate::seeding;
    use rand::Rng;

    #[test]
    fn flatten_is_row_major() {
        let u = ClientUpdate {
            client_id: 3,
            round_index: 1,
            grad: ModelParams::new(vec![vec![2, 2], vec![1]], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap(),
            fallback: false,
        };
        let f = flatten(&u);
        assert_eq!(f.vector, vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(f.client_id, 3);
        let back = ModelParams::new(u.grad.shapes().to_vec(), f.vector).unwrap();
        assert_eq!(back, u.grad);
    }

    #[test]
    fn std_hand_cases() {
        assert_eq!(std_stat(&[1.0, 1.0, 1.0]).unwrap(), 0.0);
        assert_eq!(std_stat(&[0.0, 2.0]).unwrap(), 1.0);
        assert!(matches!(std_stat(&[1.0]), Err(DetectError::TooShort(1))));
    }

    #[test]
    fn std_of_uniform_sample() {
        let mut rng = seeding::stream(5, &[]);
        let v: Vec<f64> = (0..100_000).map(|_| rng.gen_range(-1e-3..=1e-3)).collect();
        let expected = 1e-3 / 3f64.sqrt();
        assert!((std_stat(&v).unwrap() - expected).abs() / expected < 0.05);
    }

    #[test]
    fn detector_kind_names_round_trip() {
        for k in DetectorKind::ALL {
            assert_eq!(DetectorKind::parse(k.name()), Some(k));
        }
        assert_eq!(DetectorKind::parse("std"), None);
    }
}
