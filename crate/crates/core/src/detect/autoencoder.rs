//! Reconstruction-error detector.

use super::network::CompressionNet;
use super::{scale_inputs, stack, DetectError, DetectorConfig, DetectorKind, DetectorOutput, FlatUpdate};
use crate::numkit::{Adam, Graph, Tensor, Var};
use crate::seeding;

/// Trains the compression net on the batch itself (full batch, Adam) and
/// scores each vector by its mean squared reconstruction error, reported in
/// the units of the original updates.
pub fn autoencoder_score(batch: &[FlatUpdate], cfg: &DetectorConfig, seed: u64) -> Result<DetectorOutput, DetectError> {
    cfg.validate()?;
    let (mut x, n, d) = stack(batch, 2)?;
    let scale = scale_inputs(&mut x, cfg.input_scaling);
    let net = CompressionNet::new(d, cfg.hidden, cfg.latent)?;
    let mut rng = seeding::stream(seed, &[seeding::DETECTOR, 0]);
    let mut params = net.init(&mut rng);
    let input = Tensor::matrix(n, d, x)?;
    let mut adam = Adam::new(cfg.learning_rate);
    let mut losses = Vec::with_capacity(cfg.ae_epochs);

    for epoch in 0..cfg.ae_epochs {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
        let xv = g.constant(input.clone());
        let out = net.forward(&mut g, &vars, xv)?;
        let loss = g.mse(out.reconstruction, xv)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(DetectError::NonFiniteLoss { epoch });
        }
        losses.push(value);
        let grads = g.backward(loss)?;
        let gs: Vec<Tensor> = vars
            .iter()
            .zip(&params)
            .map(|(v, p)| grads.get_or_zeros(*v, p.shape()))
            .collect();
        adam.step(&mut params, &gs)?;
    }

    let mut g = Graph::new();
    let vars: Vec<Var> = params.into_iter().map(|p| g.constant(p)).collect();
    let xv = g.constant(input.clone());
    let out = net.forward(&mut g, &vars, xv)?;
    let recon = g.value(out.reconstruction).values();
    let scores = (0..n)
        .map(|i| {
            let row = i * d..(i + 1) * d;
            input.values()[row.clone()]
                .iter()
                .zip(&recon[row])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / d as f64
                * scale
                * scale
        })
        .collect();
    Ok(DetectorOutput {
        kind: DetectorKind::Autoencoder,
        round: 0,
        client_ids: batch.iter().map(|u| u.client_id).collect(),
        scores,
        losses,
    })
}
