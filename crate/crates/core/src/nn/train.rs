use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::net::{backward_impl, forward, predict};
use super::params::{sgd_step, ModelParams};
use super::spec::ModelSpec;
use crate::data::LabeledImage;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Client-side optimiser settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for LocalTraining {
    fn default() -> Self {
        Self { epochs: 1, batch_size: 32, lr: 0.01 }
    }
}

fn batch_of(samples: &[&LabeledImage]) -> Result<(Tensor, Vec<usize>)> {
    let x = Tensor::stack(samples.iter().map(|s| &s.pixels))?;
    Ok((x, samples.iter().map(|s| s.label).collect()))
}

fn one_hot(labels: &[usize], k: usize) -> Result<Vec<f64>> {
    let mut t = vec![0.0; labels.len() * k];
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::LabelOutOfRange { label: l, classes: k });
        }
        t[i * k + l] = 1.0;
    }
    Ok(t)
}

/// Mini-batch SGD over `dataset` for `cfg.epochs` epochs. Each epoch visits the
/// samples in an order drawn from `seed`.
pub fn train_local(
    spec: &ModelSpec,
    params: &ModelParams,
    dataset: &[LabeledImage],
    cfg: &LocalTraining,
    seed: u64,
) -> Result<ModelParams> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut current = params.clone();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut order: Vec<&LabeledImage> = dataset.iter().collect();
    let k = spec.num_classes();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, labels) = batch_of(chunk)?;
            let (_, cache) = forward(spec, &current, &x)?;
            let (_, grad) = backward_impl(spec, &current, &cache, &one_hot(&labels, k)?, false)?;
            current = sgd_step(&current, &grad.params, cfg.lr)?;
        }
    }
    Ok(current)
}

/// Mean cross-entropy over a dataset.
pub fn evaluate_loss(spec: &ModelSpec, params: &ModelParams, dataset: &[LabeledImage]) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for chunk in dataset.chunks(256) {
        let refs: Vec<&LabeledImage> = chunk.iter().collect();
        let (x, labels) = batch_of(&refs)?;
        let (_, cache) = forward(spec, params, &x)?;
        let (loss, _) = backward_impl(spec, params, &cache, &one_hot(&labels, spec.num_classes())?, false)?;
        total += loss * chunk.len() as f64;
    }
    Ok(total / dataset.len() as f64)
}

/// Percentage of correctly classified samples.
pub fn accuracy(spec: &ModelSpec, params: &ModelParams, dataset: &[LabeledImage]) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut correct = 0usize;
    for chunk in dataset.chunks(256) {
        let refs: Vec<&LabeledImage> = chunk.iter().collect();
        let (x, labels) = batch_of(&refs)?;
        let pred = predict(spec, params, &x)?;
        correct += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(100.0 * correct as f64 / dataset.len() as f64)
}
