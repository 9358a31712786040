//! Gaussian mixture parameters estimated from soft memberships, and the
//! sample energy `E(z) = −log Σ_k φ_k N(z; μ_k, Σ_k)`.

use serde::{Deserialize, Serialize};

use super::DetectError;
use crate::numkit::{cholesky, forward_substitute};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmParams {
    pub phi: Vec<f64>,
    pub mu: Vec<Vec<f64>>,
    /// Row-major `d×d` covariance per component.
    pub sigma: Vec<Vec<f64>>,
}

impl GmmParams {
    pub fn components(&self) -> usize {
        self.phi.len()
    }

    pub fn dim(&self) -> usize {
        self.mu.first().map_or(0, Vec::len)
    }

    /// Weighted moments of the rows of `z` (n×d) under memberships `gamma`
    /// (n×K), with `eps·I` added to every covariance.
    pub fn from_memberships(z: &[f64], n: usize, d: usize, gamma: &[f64], k: usize, eps: f64) -> Self {
        let mut phi = vec![0.0; k];
        let mut mu = vec![vec![0.0; d]; k];
        let mut sigma = vec![vec![0.0; d * d]; k];
        for c in 0..k {
            let nk: f64 = (0..n).map(|i| gamma[i * k + c]).sum();
            phi[c] = nk / n as f64;
            for i in 0..n {
                let w = gamma[i * k + c];
                for j in 0..d {
                    mu[c][j] += w * z[i * d + j];
                }
            }
            mu[c].iter_mut().for_each(|m| *m /= nk);
            for i in 0..n {
                let w = gamma[i * k + c];
                let row = &z[i * d..(i + 1) * d];
                for a in 0..d {
                    let da = row[a] - mu[c][a];
                    for b in 0..d {
                        sigma[c][a * d + b] += w * da * (row[b] - mu[c][b]);
                    }
                }
            }
            for a in 0..d {
                for b in 0..d {
                    sigma[c][a * d + b] /= nk;
                }
                sigma[c][a * d + a] += eps;
            }
        }
        Self { phi, mu, sigma }
    }

    pub fn validate(&self) -> Result<(), DetectError> {
        let total: f64 = self.phi.iter().sum();
        if (total - 1.0).abs() > 1e-9 || self.phi.iter().any(|&p| !(p >= 0.0)) {
            return Err(DetectError::InvalidGmm(format!("mixture weights sum to {total}")));
        }
        let d = self.dim();
        if self.mu.iter().any(|m| m.len() != d) || self.sigma.iter().any(|s| s.len() != d * d) {
            return Err(DetectError::InvalidGmm("inconsistent component dimensions".into()));
        }
        Ok(())
    }

    /// Factorizes every covariance once for repeated energy evaluation.
    pub fn prepare(&self) -> Result<PreparedGmm, DetectError> {
        self.validate()?;
        let d = self.dim();
        let mut parts = Vec::with_capacity(self.components());
        for (k, sigma) in self.sigma.iter().enumerate() {
            if self.phi[k] == 0.0 {
                continue;
            }
            let chol = cholesky(sigma, d).ok_or(DetectError::NotPositiveDefinite { component: k })?;
            let log_det: f64 = (0..d).map(|i| 2.0 * chol[i * d + i].ln()).sum();
            parts.push(PreparedComponent {
                log_norm: self.phi[k].ln() - 0.5 * (d as f64 * LN_2PI + log_det),
                mu: self.mu[k].clone(),
                chol,
            });
        }
        Ok(PreparedGmm { dim: d, parts })
    }
}

#[derive(Debug, Clone)]
struct PreparedComponent {
    log_norm: f64,
    mu: Vec<f64>,
    chol: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PreparedGmm {
    dim: usize,
    parts: Vec<PreparedComponent>,
}

impl PreparedGmm {
    pub fn energy(&self, z: &[f64]) -> f64 {
        let d = self.dim;
        let logs: Vec<f64> = self
            .parts
            .iter()
            .map(|p| {
                let diff: Vec<f64> = z.iter().zip(&p.mu).map(|(a, b)| a - b).collect();
                let y = forward_substitute(&p.chol, &diff, d);
                p.log_norm - 0.5 * y.iter().map(|v| v * v).sum::<f64>()
            })
            .collect();
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        -(max + logs.iter().map(|l| (l - max).exp()).sum::<f64>().ln())
    }
}

/// Energy of a single feature vector.
pub fn gmm_energy(z: &[f64], gmm: &GmmParams) -> Result<f64, DetectError> {
    if z.len() != gmm.dim() {
        return Err(DetectError::InvalidGmm(format!(
            "feature length {} does not match mixture dimension {}",
            z.len(),
            gmm.dim()
        )));
    }
    Ok(gmm.prepare()?.energy(z))
}
