//! Compression (autoencoder) and estimation networks.

use rand::Rng;

use super::DetectError;
use crate::numkit::{glorot_uniform, Graph, NumError, Tensor, Var};

/// `input → hidden (tanh) → latent → hidden (tanh) → input`.
pub(crate) struct CompressionNet {
    pub input: usize,
    pub hidden: usize,
    pub latent: usize,
}

pub(crate) struct CompressionOut {
    pub latent: Var,
    pub reconstruction: Var,
}

impl CompressionNet {
    pub fn new(input: usize, hidden: usize, latent: usize) -> Result<Self, DetectError> {
        if latent >= input {
            return Err(DetectError::Architecture(format!(
                "bottleneck width {latent} must be smaller than input width {input}"
            )));
        }
        Ok(Self { input, hidden, latent })
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Tensor> {
        let dims = [
            (self.input, self.hidden),
            (self.hidden, self.latent),
            (self.latent, self.hidden),
            (self.hidden, self.input),
        ];
        dims.iter()
            .flat_map(|&(i, o)| [glorot_uniform(i, o, rng), Tensor::zeros(&[1, o])])
            .collect()
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<CompressionOut, NumError> {
        let h = g.matmul(x, p[0])?;
        let h = g.add_row(h, p[1])?;
        let h = g.tanh(h)?;
        let z = g.matmul(h, p[2])?;
        let latent = g.add_row(z, p[3])?;
        let h = g.matmul(latent, p[4])?;
        let h = g.add_row(h, p[5])?;
        let h = g.tanh(h)?;
        let r = g.matmul(h, p[6])?;
        let reconstruction = g.add_row(r, p[7])?;
        Ok(CompressionOut { latent, reconstruction })
    }
}

/// `z → hidden (tanh) → K` with row-wise softmax.
pub(crate) struct EstimationNet {
    pub input: usize,
    pub hidden: usize,
    pub components: usize,
}

impl EstimationNet {
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Tensor> {
        vec![
            glorot_uniform(self.input, self.hidden, rng),
            Tensor::zeros(&[1, self.hidden]),
            glorot_uniform(self.hidden, self.components, rng),
            Tensor::zeros(&[1, self.components]),
        ]
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], z: Var) -> Result<Var, NumError> {
        let h = g.matmul(z, p[0])?;
        let h = g.add_row(h, p[1])?;
        let h = g.tanh(h)?;
        let o = g.matmul(h, p[2])?;
        let o = g.add_row(o, p[3])?;
        g.softmax(o)
    }
}
