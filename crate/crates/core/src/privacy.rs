//! Client-level differential privacy: update clipping, server-side Gaussian
//! noise on the aggregate, and per-round participant sampling.

use std::collections::BTreeSet;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpConfig {
    #[serde(default = "default_clip")]
    pub clip_bound: f64,
    #[serde(default = "default_noise")]
    pub server_noise_std: f64,
    #[serde(default = "default_q")]
    pub participation_ratio: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_clip() -> f64 {
    1.0
}

fn default_noise() -> f64 {
    1e-3
}

fn default_q() -> f64 {
    0.25
}

impl Default for DpConfig {
    fn default() -> Self {
        Self {
            clip_bound: default_clip(),
            server_noise_std: default_noise(),
            participation_ratio: default_q(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DpError {
    #[error("clip_bound must be positive, got {0}")]
    ClipBound(f64),
    #[error("server_noise_std must be non-negative, got {0}")]
    NoiseStd(f64),
    #[error("participation_ratio q must lie in (0,1], got {0}")]
    Ratio(f64),
}

impl DpConfig {
    pub fn validate(&self) -> Result<(), DpError> {
        if !(self.clip_bound > 0.0) || !self.clip_bound.is_finite() {
            return Err(DpError::ClipBound(self.clip_bound));
        }
        if !(self.server_noise_std >= 0.0) || !self.server_noise_std.is_finite() {
            return Err(DpError::NoiseStd(self.server_noise_std));
        }
        if !(self.participation_ratio > 0.0 && self.participation_ratio <= 1.0) {
            return Err(DpError::Ratio(self.participation_ratio));
        }
        Ok(())
    }
}

/// `g · min(1, C/‖g‖₂)`.
pub fn clip_update(update: &ModelParams, clip_bound: f64) -> ModelParams {
    let norm = update.l2_norm();
    if norm <= clip_bound || norm == 0.0 {
        return update.clone();
    }
    let mut clipped = update.scaled(clip_bound / norm);
    // rounding can leave the rescaled norm a hair above the bound
    let after = clipped.l2_norm();
    if after > clip_bound {
        clipped = clipped.scaled(clip_bound / after * (1.0 - f64::EPSILON));
    }
    clipped
}

/// Adds i.i.d. N(0, σ²) to every component in place.
pub fn add_server_noise<R: Rng + ?Sized>(params: &mut ModelParams, std: f64, rng: &mut R) {
    if std <= 0.0 {
        return;
    }
    let noise = Normal::new(0.0, std).expect("finite non-negative std");
    for v in params.values_mut() {
        *v += noise.sample(rng);
    }
}

/// Each client joins independently with probability `q`.
pub fn sample_participants<R: Rng + ?Sized>(n_clients: usize, q: f64, rng: &mut R) -> BTreeSet<usize> {
    if q >= 1.0 {
        return (0..n_clients).collect();
    }
    (0..n_clients).filter(|_| rng.gen::<f64>() < q).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding;
    use proptest::prelude::*;

    fn params(v: Vec<f64>) -> ModelParams {
        ModelParams::new(vec![vec![v.len()]], v).unwrap()
    }

    #[test]
    fn clip_inside_ball_is_identity() {
        let g = params(vec![0.3, 0.4]); // norm 0.5
        assert_eq!(clip_update(&g, 1.0), g);
    }

    #[test]
    fn clip_scales_to_bound() {
        let g = params(vec![1.2, 1.6]); // norm 2
        let c = clip_update(&g, 1.0);
        assert!((c.l2_norm() - 1.0).abs() < 1e-12);
        assert!(c.l2_norm() <= 1.0);
        let z = params(vec![0.0; 3]);
        assert_eq!(clip_update(&z, 1.0), z);
    }

    #[test]
    fn zero_noise_is_identity() {
        let mut p = params(vec![1.0, 2.0]);
        add_server_noise(&mut p, 0.0, &mut seeding::stream(1, &[]));
        assert_eq!(p.values(), &[1.0, 2.0]);
    }

    #[test]
    fn server_noise_is_centered_and_seeded() {
        let n = 100_000;
        let std = 1e-3;
        let clean = ModelParams::zeros(vec![vec![n]]);
        let mut a = clean.clone();
        add_server_noise(&mut a, std, &mut seeding::stream(1, &[]));
        let mean = a.values().iter().sum::<f64>() / n as f64;
        assert!(mean.abs() <= 3.0 * std / (n as f64).sqrt());
        let mut b = clean.clone();
        add_server_noise(&mut b, std, &mut seeding::stream(1, &[]));
        let mut c = clean;
        add_server_noise(&mut c, std, &mut seeding::stream(2, &[]));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn full_participation_at_q_one() {
        let s = sample_participants(100, 1.0, &mut seeding::stream(1, &[]));
        assert_eq!(s.len(), 100);
    }

    #[test]
    fn quarter_participation_mean_in_band() {
        let rounds = 80;
        let total: usize = (1..=rounds)
            .map(|r| sample_participants(100, 0.25, &mut seeding::stream(9, &[seeding::PARTICIPATION, r])).len())
            .sum();
        let mean = total as f64 / rounds as f64;
        assert!((mean - 25.0).abs() <= 5.0, "mean participants {mean}");
    }

    #[test]
    fn config_invariants() {
        assert!(DpConfig::default().validate().is_ok());
        let bad_q = DpConfig {
            participation_ratio: 0.0,
            ..DpConfig::default()
        };
        assert_eq!(bad_q.validate(), Err(DpError::Ratio(0.0)));
        let bad_c = DpConfig {
            clip_bound: 0.0,
            ..DpConfig::default()
        };
        assert!(bad_c.validate().is_err());
    }

    proptest! {
        #[test]
        fn clipped_norm_never_exceeds_bound(
            v in proptest::collection::vec(-10.0f64..10.0, 1..64),
            c in 1e-3f64..5.0,
        ) {
            let out = clip_update(&params(v), c);
            prop_assert!(out.l2_norm() <= c + 1e-12);
        }
    }
}
