//! Free-rider update fabrication.
//!
//! Free riders never touch data. They build an update from their own RNG
//! stream and from the global models they have received, and nothing else.

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Random,
    Delta,
    AdvancedDelta,
    DpDelta,
}

/// What a delta-style attacker submits before it holds two models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    Zeros,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// Uniform range R for `random`.
    #[serde(rename = "R", default = "default_range")]
    pub range: f64,
    /// Gaussian noise STD for `advanced_delta`.
    #[serde(default)]
    pub sigma: Option<f64>,
    #[serde(default = "default_fallback")]
    pub first_round_fallback: Fallback,
    #[serde(default = "default_range")]
    pub fallback_range: f64,
    /// `dp_delta` divides the model difference by the round gap.
    #[serde(default = "default_true")]
    pub divide_by_gap: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_range() -> f64 {
    1e-4
}

fn default_fallback() -> Fallback {
    Fallback::Random
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AttackError {
    #[error("attack range R must be positive for kind=random, got {0}")]
    BadRange(f64),
    #[error("sigma is required and must be non-negative for kind=advanced_delta")]
    MissingSigma,
    #[error("fallback range must be non-negative, got {0}")]
    BadFallbackRange(f64),
}

impl AttackConfig {
    pub fn random(range: f64) -> Self {
        Self {
            kind: AttackKind::Random,
            range,
            sigma: None,
            first_round_fallback: Fallback::Random,
            fallback_range: default_range(),
            divide_by_gap: true,
            seed: 0,
        }
    }

    pub fn delta() -> Self {
        Self {
            kind: AttackKind::Delta,
            ..Self::random(default_range())
        }
    }

    pub fn advanced_delta(sigma: f64) -> Self {
        Self {
            kind: AttackKind::AdvancedDelta,
            sigma: Some(sigma),
            ..Self::random(default_range())
        }
    }

    pub fn dp_delta(divide_by_gap: bool) -> Self {
        Self {
            kind: AttackKind::DpDelta,
            divide_by_gap,
            ..Self::random(default_range())
        }
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        match self.kind {
            AttackKind::Random if !(self.range > 0.0) => return Err(AttackError::BadRange(self.range)),
            AttackKind::AdvancedDelta => match self.sigma {
                Some(s) if s >= 0.0 && s.is_finite() => {}
                _ => return Err(AttackError::MissingSigma),
            },
            _ => {}
        }
        if !(self.fallback_range >= 0.0) {
            return Err(AttackError::BadFallbackRange(self.fallback_range));
        }
        Ok(())
    }
}

/// The most recent global models a free rider has received, oldest first.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FreeRiderState {
    received: VecDeque<(usize, ModelParams)>,
}

impl FreeRiderState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stores a model received at `round`. Rounds must strictly increase;
    /// a repeated or older round is ignored.
    pub fn receive(&mut self, round: usize, model: ModelParams) {
        if let Some((last, _)) = self.received.back() {
            if round <= *last {
                return;
            }
        }
        self.received.push_back((round, model));
        while self.received.len() > 2 {
            self.received.pop_front();
        }
    }

    pub fn rounds(&self) -> Vec<usize> {
        self.received.iter().map(|(r, _)| *r).collect()
    }

    /// `(older, newer)` when two models are held.
    pub fn pair(&self) -> Option<(&(usize, ModelParams), &(usize, ModelParams))> {
        if self.received.len() == 2 {
            Some((&self.received[0], &self.received[1]))
        } else {
            None
        }
    }

    pub fn latest(&self) -> Option<&ModelParams> {
        self.received.back().map(|(_, m)| m)
    }
}

/// Every component i.i.d. uniform on [−R, R]; `R = 0` gives the zero update.
pub fn random_weights<R: Rng + ?Sized>(template: &ModelParams, range: f64, rng: &mut R) -> ModelParams {
    let mut out = template.zeros_like();
    if range > 0.0 {
        for v in out.values_mut() {
            *v = rng.gen_range(-range..=range);
        }
    }
    out
}

/// `M_older − M_newer` from the two stored models.
pub fn delta_weights(state: &FreeRiderState) -> Option<ModelParams> {
    let ((_, older), (_, newer)) = state.pair()?;
    older.sub(newer).ok()
}

/// Delta weights plus i.i.d. N(0, σ²) per component.
pub fn advanced_delta<R: Rng + ?Sized>(state: &FreeRiderState, sigma: f64, rng: &mut R) -> Option<ModelParams> {
    let mut delta = delta_weights(state)?;
    if sigma > 0.0 {
        let noise = Normal::new(0.0, sigma).ok()?;
        for v in delta.values_mut() {
            *v += noise.sample(rng);
        }
    }
    Some(delta)
}

/// Delta of the two last-received models, optionally divided by the number
/// of rounds between them.
pub fn dp_delta(state: &FreeRiderState, divide_by_gap: bool) -> Option<ModelParams> {
    let ((older_round, _), (newer_round, _)) = state.pair()?;
    let gap = newer_round - older_round;
    let delta = delta_weights(state)?;
    Some(if divide_by_gap && gap > 1 {
        delta.scaled(1.0 / gap as f64)
    } else {
        delta
    })
}

/// A fabricated update and whether the cold-start fallback produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Fabricated {
    pub grad: ModelParams,
    pub fallback: bool,
}

/// Builds one free-rider submission. `template` supplies the shape.
pub fn fabricate<R: Rng + ?Sized>(
    cfg: &AttackConfig,
    state: &FreeRiderState,
    template: &ModelParams,
    rng: &mut R,
) -> Fabricated {
    let made = match cfg.kind {
        AttackKind::Random => Some(random_weights(template, cfg.range, rng)),
        AttackKind::Delta => delta_weights(state),
        AttackKind::AdvancedDelta => advanced_delta(state, cfg.sigma.unwrap_or(0.0), rng),
        AttackKind::DpDelta => dp_delta(state, cfg.divide_by_gap),
    };
    match made {
        Some(grad) => Fabricated { grad, fallback: false },
        None => {
            let grad = match cfg.first_round_fallback {
                Fallback::Zeros => template.zeros_like(),
                Fallback::Random => random_weights(template, cfg.fallback_range, rng),
            };
            Fabricated { grad, fallback: true }
        }
    }
}
