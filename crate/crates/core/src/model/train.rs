use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::grad::loss_and_grad;
use super::{ModelDims, ModelParams, TrainSample};
use crate::error::{ConfigError, ModelError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight of the action term in the training loss.
    pub lambda: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            learning_rate: 1e-3,
            lambda: 1.0,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.batch_size == 0 {
            return Err(ConfigError::invalid("pretrain.batch_size", "must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(ConfigError::invalid("pretrain.learning_rate", "must be positive"));
        }
        if !(self.lambda >= 0.0) {
            return Err(ConfigError::invalid("pretrain.lambda", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
}

struct Adam {
    m: ModelParams,
    v: ModelParams,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(dims: ModelDims) -> Self {
        Self {
            m: ModelParams::zeros(dims),
            v: ModelParams::zeros(dims),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut ModelParams, grad: &ModelParams, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        let gs = grad.fields();
        let ms = self.m.fields_mut();
        let vs = self.v.fields_mut();
        for ((((_, p), (_, g)), (_, m)), (_, v)) in params.fields_mut().into_iter().zip(gs).zip(ms).zip(vs) {
            for i in 0..p.len() {
                m[i] = Self::BETA1 * m[i] + (1.0 - Self::BETA1) * g[i];
                v[i] = Self::BETA2 * v[i] + (1.0 - Self::BETA2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Number of chunks a minibatch gradient is split into. Fixed, so the
/// floating-point reduction order never depends on the thread pool.
const GRAD_CHUNKS: usize = 4;

fn minibatch_grad(params: &ModelParams, batch: &[&TrainSample], lambda: f64) -> Result<(f64, ModelParams), ModelError> {
    let chunk = batch.len().div_ceil(GRAD_CHUNKS).max(1);
    let parts: Vec<(usize, f64, ModelParams)> = batch
        .par_chunks(chunk)
        .map(|c| loss_and_grad(params, c, lambda).map(|(l, g)| (c.len(), l, g)))
        .collect::<Result<_, _>>()?;
    let total = batch.len() as f64;
    let mut loss = 0.0;
    let mut grad = ModelParams::zeros(params.dims);
    for (len, l, g) in parts {
        let w = len as f64 / total;
        loss += w * l;
        for ((_, acc), (_, part)) in grad.fields_mut().into_iter().zip(g.fields()) {
            acc.iter_mut().zip(part).for_each(|(a, p)| *a += w * p);
        }
    }
    Ok((loss, grad))
}

/// Trains every parameter on the foresight-plus-action objective with Adam.
pub fn pretrain(
    dataset: &[TrainSample],
    dims: ModelDims,
    hyper: &PretrainConfig,
) -> Result<(ModelParams, Vec<EpochLog>), ModelError> {
    if dataset.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    dims.validate()?;
    hyper.validate()?;
    let mut params = ModelParams::init(dims, hyper.seed);
    let mut adam = Adam::new(dims);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ 0x7368_7566_666c_6500);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut log = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for idx in order.chunks(hyper.batch_size) {
            let batch: Vec<&TrainSample> = idx.iter().map(|&i| &dataset[i]).collect();
            let (loss, grad) = minibatch_grad(&params, &batch, hyper.lambda)?;
            adam.step(&mut params, &grad, hyper.learning_rate);
            sum += loss * batch.len() as f64;
        }
        log.push(EpochLog {
            epoch,
            mean_loss: sum / dataset.len() as f64,
        });
    }
    Ok((params, log))
}
