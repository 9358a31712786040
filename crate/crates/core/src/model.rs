//! Flat model parameters and the task classifier trained by honest clients.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numkit::{glorot_uniform, Graph, NumError, Tensor, Var};

/// Flat parameter vector plus per-layer shapes.
///
/// Layers are stored in declaration order, each row-major, so the flat
/// vector is exactly the row-wise concatenation of every layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    shapes: Vec<Vec<usize>>,
    values: Vec<f64>,
}

impl ModelParams {
    pub fn new(shapes: Vec<Vec<usize>>, values: Vec<f64>) -> Result<Self, NumError> {
        let expected: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        if expected != values.len() {
            return Err(NumError::LengthMismatch {
                shape: vec![expected],
                len: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(NumError::NonFinite {
                context: "model parameters".into(),
            });
        }
        Ok(Self { shapes, values })
    }

    pub fn zeros(shapes: Vec<Vec<usize>>) -> Self {
        let n = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        Self {
            shapes,
            values: vec![0.0; n],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.shapes.clone())
    }

    pub fn from_tensors(tensors: &[Tensor]) -> Self {
        Self {
            shapes: tensors.iter().map(|t| t.shape().to_vec()).collect(),
            values: tensors.iter().flat_map(|t| t.values().iter().copied()).collect(),
        }
    }

    pub fn to_tensors(&self) -> Vec<Tensor> {
        let mut offset = 0;
        self.shapes
            .iter()
            .map(|s| {
                let n: usize = s.iter().product();
                let t = Tensor::from_parts(s.clone(), self.values[offset..offset + n].to_vec());
                offset += n;
                t
            })
            .collect()
    }

    pub fn shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shapes == other.shapes
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn check(&self, other: &Self, op: &'static str) -> Result<(), NumError> {
        if !self.same_shape(other) {
            return Err(NumError::ShapeMismatch {
                op,
                left: vec![self.len()],
                right: vec![other.len()],
            });
        }
        Ok(())
    }

    /// Componentwise `self − other`.
    pub fn sub(&self, other: &Self) -> Result<Self, NumError> {
        self.check(other, "params_sub")?;
        Ok(Self {
            shapes: self.shapes.clone(),
            values: self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect(),
        })
    }

    /// `self += alpha · other`.
    pub fn axpy(&mut self, alpha: f64, other: &Self) -> Result<(), NumError> {
        self.check(other, "params_axpy")?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            shapes: self.shapes.clone(),
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Fully connected classifier: relu hidden layers, linear output logits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub num_classes: usize,
}

impl MlpSpec {
    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.hidden);
        w.push(self.num_classes);
        w
    }

    /// Weight `[in, out]` then bias `[out]`, per layer.
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.widths()
            .windows(2)
            .flat_map(|w| [vec![w[0], w[1]], vec![w[1]]])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.shapes().iter().map(|s| s.iter().product::<usize>()).sum()
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ModelParams {
        let tensors: Vec<Tensor> = self
            .widths()
            .windows(2)
            .flat_map(|w| [glorot_uniform(w[0], w[1], rng), Tensor::zeros(&[w[1]])])
            .collect();
        ModelParams::from_tensors(&tensors)
    }

    /// Logits for a batch `x` (rows are samples) given parameter leaves in
    /// [`MlpSpec::shapes`] order.
    pub fn logits(&self, g: &mut Graph, params: &[Var], x: Var) -> Result<Var, NumError> {
        let layers = params.len() / 2;
        let mut h = x;
        for (l, pair) in params.chunks(2).enumerate() {
            let z = g.matmul(h, pair[0])?;
            h = g.add_row(z, pair[1])?;
            if l + 1 < layers {
                h = g.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Fraction of samples whose arg-max logit equals the label.
    pub fn accuracy(&self, params: &ModelParams, features: &[f64], labels: &[usize]) -> Result<f64, NumError> {
        if labels.is_empty() {
            return Ok(0.0);
        }
        let mut g = Graph::new();
        let vars: Vec<Var> = params.to_tensors().into_iter().map(|t| g.constant(t)).collect();
        let x = g.constant(Tensor::matrix(labels.len(), self.input_dim, features.to_vec())?);
        let out = self.logits(&mut g, &vars, x)?;
        let logits = g.value(out);
        let c = self.num_classes;
        let correct = labels
            .iter()
            .enumerate()
            .filter(|(i, &label)| {
                let row = &logits.values()[i * c..(i + 1) * c];
                let best = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
                    .map(|(j, _)| j)
                    .unwrap_or(0);
                best == label
            })
            .count();
        Ok(correct as f64 / labels.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn desk_model_has_506_parameters() {
        let spec = MlpSpec {
            input_dim: 20,
            hidden: vec![16],
            num_classes: 10,
        };
        assert_eq!(spec.param_count(), 20 * 16 + 16 + 16 * 10 + 10);
        assert_eq!(spec.shapes(), vec![vec![20, 16], vec![16], vec![16, 10], vec![10]]);
        let p = spec.init(&mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(p.len(), 506);
    }

    #[test]
    fn tensor_round_trip_preserves_layout() {
        let spec = MlpSpec {
            input_dim: 3,
            hidden: vec![2],
            num_classes: 2,
        };
        let p = spec.init(&mut ChaCha8Rng::seed_from_u64(1));
        let back = ModelParams::from_tensors(&p.to_tensors());
        assert_eq!(p, back);
    }

    #[test]
    fn sub_and_axpy() {
        let a = ModelParams::new(vec![vec![2]], vec![3.0, 5.0]).unwrap();
        let b = ModelParams::new(vec![vec![2]], vec![1.0, 1.0]).unwrap();
        assert_eq!(a.sub(&b).unwrap().values(), &[2.0, 4.0]);
        let mut c = a.clone();
        c.axpy(-0.5, &b).unwrap();
        assert_eq!(c.values(), &[2.5, 4.5]);
        let wrong = ModelParams::zeros(vec![vec![3]]);
        assert!(a.sub(&wrong).is_err());
    }
}
