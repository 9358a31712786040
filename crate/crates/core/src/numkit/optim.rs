use serde::{Deserialize, Serialize};

use super::{NumError, Tensor};

/// Local minibatch SGD settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            batch_size: 10,
            epochs: 1,
        }
    }
}

impl SgdConfig {
    /// A zero learning rate is accepted so that "no movement" runs can be expressed.
    pub fn validate(&self) -> Result<(), NumError> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(NumError::InvalidConfig(format!(
                "learning_rate must be a non-negative finite number, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(NumError::InvalidConfig("batch_size must be positive".into()));
        }
        Ok(())
    }
}

fn check_pairs(params: &[Tensor], grads: &[Tensor]) -> Result<(), NumError> {
    if params.len() != grads.len() {
        return Err(NumError::ShapeMismatch {
            op: "sgd_step",
            left: vec![params.len()],
            right: vec![grads.len()],
        });
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(NumError::ShapeMismatch {
                op: "sgd_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
    }
    Ok(())
}

/// `p ← p − lr·g` for every parameter tensor.
pub fn sgd_step(params: &mut [Tensor], grads: &[Tensor], learning_rate: f64) -> Result<(), NumError> {
    check_pairs(params, grads)?;
    for (p, g) in params.iter_mut().zip(grads) {
        for (pv, gv) in p.values_mut().iter_mut().zip(g.values()) {
            *pv -= learning_rate * gv;
        }
    }
    Ok(())
}

/// Adam with bias correction. Used for the detector networks, whose inputs
/// and losses span several orders of magnitude.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: i32,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<(), NumError> {
        check_pairs(params, grads)?;
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (idx, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.first[idx], &mut self.second[idx]);
            for (j, (pv, &gv)) in p.values_mut().iter_mut().zip(g.values()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gv;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gv * gv;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *pv -= self.learning_rate * mh / (vh.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Graph;

    #[test]
    fn single_step_formula() {
        let mut p = vec![Tensor::row(vec![1.0]).unwrap()];
        let g = vec![Tensor::row(vec![1.0]).unwrap()];
        sgd_step(&mut p, &g, 0.1).unwrap();
        assert!((p[0].item() - 0.9).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut p = vec![Tensor::row(vec![1.5, -2.0]).unwrap()];
        let g = vec![Tensor::zeros(&[1, 2])];
        sgd_step(&mut p, &g, 0.7).unwrap();
        assert_eq!(p[0].values(), &[1.5, -2.0]);
    }

    #[test]
    fn two_half_steps_on_square_reach_zero() {
        // x ← x − 0.5·2x = 0 after the first step and stays there.
        let mut p = vec![Tensor::scalar(1.0).unwrap()];
        for _ in 0..2 {
            let mut g = Graph::new();
            let x = g.param(p[0].clone());
            let y = g.mul(x, x).unwrap();
            let grads = g.backward(y).unwrap();
            sgd_step(&mut p, &[grads.get(x).unwrap().clone()], 0.5).unwrap();
        }
        assert_eq!(p[0].item(), 0.0);
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let mut p = vec![Tensor::zeros(&[1, 2])];
        let g = vec![Tensor::zeros(&[2, 1])];
        assert!(sgd_step(&mut p, &g, 0.1).is_err());
        assert!(sgd_step(&mut p, &[], 0.1).is_err());
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut p = vec![Tensor::row(vec![1.0, -1.0]).unwrap()];
        let g = vec![Tensor::row(vec![1e-9, -1e-9]).unwrap()];
        let mut adam = Adam::new(0.01);
        adam.step(&mut p, &g).unwrap();
        assert!(p[0].values()[0] < 1.0 && p[0].values()[1] > -1.0);
    }
}
