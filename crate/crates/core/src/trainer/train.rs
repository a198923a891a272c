use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backprop::{backward, sgd_step};
use super::loss::cross_entropy_loss;
use crate::dataset::AssembledDataset;
use crate::error::{Error, Result};
use crate::network::{ForwardMode, Model};

/// Minimum decrease of the mean epoch loss that counts as an improvement.
pub const MIN_IMPROVEMENT: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Larger than the dataset means full-batch steps.
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without improvement before stopping; 0 disables early stopping.
    pub early_stop_patience: usize,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            batch_size: 64,
            max_epochs: 300,
            early_stop_patience: 10,
            seed: 0,
            shuffle: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_top1: f64,
    pub elapsed_seconds: f64,
}

impl EpochStats {
    /// `epoch=<i> loss=<float> top1=<float> secs=<float>`
    pub fn log_line(&self) -> String {
        format!(
            "epoch={} loss={:.6} top1={:.4} secs={:.3}",
            self.epoch, self.mean_loss, self.train_top1, self.elapsed_seconds
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.mean_loss)
    }
}

fn validate(model: &Model<f32>, data: &AssembledDataset, config: &TrainConfig) -> Result<()> {
    if data.is_empty() {
        return Err(Error::arg("cannot train on an empty dataset"));
    }
    if data.label_order != model.label_order {
        return Err(Error::arg("dataset label order differs from the model's"));
    }
    if data.image_dim != model.config.image_dim || data.text_dim != model.config.text_dim {
        return Err(Error::arg(format!(
            "dataset dims ({}, {}) differ from model dims ({}, {})",
            data.image_dim, data.text_dim, model.config.image_dim, model.config.text_dim
        )));
    }
    if !(config.learning_rate.is_finite() && config.learning_rate > 0.0) {
        return Err(Error::arg(format!(
            "learning rate must be > 0, got {}",
            config.learning_rate
        )));
    }
    if config.batch_size == 0 {
        return Err(Error::arg("batch size must be at least 1"));
    }
    Ok(())
}

/// Splits `n` rows into `ceil(n / batch)` contiguous batches whose sizes
/// differ by at most one.
pub fn batch_ranges(n: usize, batch: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    let count = n.div_ceil(batch.max(1));
    let base = n.checked_div(count).unwrap_or(0);
    let extra = n.checked_rem(count).unwrap_or(0);
    (0..count).map(move |i| {
        let start = i * base + i.min(extra);
        start..start + base + usize::from(i < extra)
    })
}

/// Trains with mini-batch SGD on the batch-mean cross-entropy.
pub fn train(
    model: &mut Model<f32>,
    data: &AssembledDataset,
    config: &TrainConfig,
) -> Result<TrainHistory> {
    train_with_observer(model, data, config, |_, _, _| Ok(()))
}

/// Like [`train`], calling `observer(stats, model, is_best)` after every epoch.
pub fn train_with_observer<F>(
    model: &mut Model<f32>,
    data: &AssembledDataset,
    config: &TrainConfig,
    mut observer: F,
) -> Result<TrainHistory>
where
    F: FnMut(&EpochStats, &Model<f32>, bool) -> Result<()>,
{
    validate(model, data, config)?;
    let mut history = TrainHistory::default();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (n1, n2) = (data.image_dim, data.text_dim);
    let c = model.num_classes();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut best = f64::INFINITY;
    let mut stale = 0;
    let start = Instant::now();

    for epoch in 1..=config.max_epochs {
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        let mut loss_sum = 0.0;
        let mut hits = 0usize;
        for range in batch_ranges(order.len(), config.batch_size) {
            let chunk = &order[range];
            let b = chunk.len();
            let mut images = Vec::with_capacity(b * n1);
            let mut texts = Vec::with_capacity(b * n2);
            let mut targets = Vec::with_capacity(b);
            for &i in chunk {
                let row = &data.rows[i];
                images.extend_from_slice(&row.image);
                texts.extend_from_slice(&row.text);
                targets.push(row.label_index);
            }
            let trace =
                model.forward_batch(&images, &texts, b, &mut ForwardMode::training(&mut rng))?;
            for (i, &t) in targets.iter().enumerate() {
                let probs = trace.probs_row(i);
                loss_sum += cross_entropy_loss(probs, t)?;
                let argmax = (0..c)
                    .max_by(|&a, &b| probs[a].total_cmp(&probs[b]).then(b.cmp(&a)))
                    .unwrap_or(0);
                hits += usize::from(argmax == t);
            }
            if !loss_sum.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    loss: loss_sum,
                });
            }
            let grads = backward(model, &trace, &targets)?;
            sgd_step(model, &grads, config.learning_rate).map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!("epoch {epoch}: {msg}")),
                other => other,
            })?;
            model.update_batchnorm_stats(&trace);
        }

        let stats = EpochStats {
            epoch,
            mean_loss: loss_sum / data.len() as f64,
            train_top1: hits as f64 / data.len() as f64,
            elapsed_seconds: start.elapsed().as_secs_f64(),
        };
        info!("{}", stats.log_line());
        let improved = stats.mean_loss < best - MIN_IMPROVEMENT;
        if improved {
            best = stats.mean_loss;
            stale = 0;
        } else {
            stale += 1;
        }
        observer(&stats, model, improved)?;
        history.epochs.push(stats);
        if config.early_stop_patience > 0 && stale >= config.early_stop_patience {
            history.stopped_early = true;
            break;
        }
    }
    Ok(history)
}
