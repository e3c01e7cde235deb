use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::Example;
use crate::error::{Error, Result};
use crate::rng;

use super::{Checkpoint, Network};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Cosine,
    Constant,
}

/// Update rule applied to each mini-batch mean gradient.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Optimizer {
    Sgd,
    #[default]
    Adam,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub peak_lr: f64,
    pub schedule: Schedule,
    pub batch_size: usize,
    pub snapshot_every: usize,
    pub seed: u64,
    /// Linear warmup over this many optimizer steps; zero starts at the peak.
    pub warmup_steps: usize,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            peak_lr: 1e-2,
            schedule: Schedule::Cosine,
            batch_size: 8,
            snapshot_every: 2,
            seed: 0,
            warmup_steps: 0,
            optimizer: Optimizer::Adam,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.peak_lr > 0.0) {
            return Err(Error::Config("peak_lr must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.snapshot_every == 0 || self.epochs % self.snapshot_every != 0 {
            return Err(Error::Config(format!(
                "snapshot_every ({}) must divide epochs ({})",
                self.snapshot_every, self.epochs
            )));
        }
        Ok(())
    }

    pub fn learning_rate(&self, step: usize, total_steps: usize) -> f64 {
        match self.schedule {
            Schedule::Cosine => cosine_lr(step, total_steps, self.peak_lr, self.warmup_steps),
            Schedule::Constant => self.peak_lr,
        }
    }
}

/// Cosine annealing from `peak` at the first post-warmup step to exactly 0
/// at the last step, after an optional linear warmup.
pub fn cosine_lr(step: usize, total_steps: usize, peak: f64, warmup_steps: usize) -> f64 {
    if step < warmup_steps {
        return peak * (step + 1) as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps + 1);
    if span == 0 {
        return peak;
    }
    let progress = (step - warmup_steps) as f64 / span as f64;
    0.5 * peak * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
}

/// Snapshots taken during one training run, in epoch order. The last entry
/// is the final model.
#[derive(Debug, Clone)]
pub struct CheckpointSeries {
    pub snapshots: Vec<Checkpoint>,
    /// Mean per-example loss observed during each epoch.
    pub epoch_losses: Vec<f64>,
}

impl CheckpointSeries {
    pub fn last(&self) -> &Checkpoint {
        self.snapshots.last().expect("series is never empty")
    }
}

pub fn mean_loss(ckpt: &Checkpoint, data: &[Example]) -> Result<f64> {
    let net = ckpt.network();
    let losses = data.par_iter().map(|e| net.loss(e)).collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Mini-batch training (SGD or Adam) on the mean completion loss with a
/// per-epoch shuffle drawn from `tc.seed`. Per-example gradients are computed in parallel and summed
/// in batch order, so results do not depend on the thread count.
pub fn train(ckpt: &Checkpoint, data: &[Example], tc: &TrainConfig) -> Result<CheckpointSeries> {
    tc.validate()?;
    if data.is_empty() {
        return Err(Error::input("cannot train on an empty dataset"));
    }
    let mut params = ckpt.params.clone();
    let steps_per_epoch = data.len().div_ceil(tc.batch_size);
    let total = steps_per_epoch * tc.epochs;
    let mut step = 0;
    let mut grad = vec![0.0; params.len()];
    let (mut m, mut v) = match tc.optimizer {
        Optimizer::Adam => (vec![0.0; params.len()], vec![0.0; params.len()]),
        Optimizer::Sgd => (Vec::new(), Vec::new()),
    };
    let mut snapshots = Vec::new();
    let mut epoch_losses = Vec::with_capacity(tc.epochs);
    for epoch in 1..=tc.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng::stream(tc.seed, epoch as u64));
        let mut loss_sum = 0.0;
        for batch in order.chunks(tc.batch_size) {
            let results = {
                let net = Network::new(&ckpt.config, &params);
                batch
                    .par_iter()
                    .map(|&i| net.loss_and_gradient(&data[i], None))
                    .collect::<Result<Vec<_>>>()?
            };
            grad.iter_mut().for_each(|g| *g = 0.0);
            for (loss, g) in &results {
                loss_sum += loss;
                for (acc, gi) in grad.iter_mut().zip(g) {
                    *acc += gi;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            let lr = tc.learning_rate(step, total);
            step += 1;
            match tc.optimizer {
                Optimizer::Sgd => {
                    for (p, g) in params.iter_mut().zip(&grad) {
                        *p -= lr * scale * g;
                    }
                }
                Optimizer::Adam => {
                    let c1 = 1.0 - ADAM_BETA1.powi(step as i32);
                    let c2 = 1.0 - ADAM_BETA2.powi(step as i32);
                    for i in 0..params.len() {
                        let g = grad[i] * scale;
                        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
                        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
                        params[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        epoch_losses.push(loss_sum / data.len() as f64);
        if epoch % tc.snapshot_every == 0 || epoch == tc.epochs {
            snapshots.push(Checkpoint { config: ckpt.config.clone(), params: params.clone(), epoch });
        }
    }
    Ok(CheckpointSeries { snapshots, epoch_losses })
}
