//! Minibatch Adam training on annotated pairs.
//!
//! Each pair member gets its own dropout mask every time it is visited. When
//! validation pairs are supplied, the deterministic (no-dropout) overall pair
//! accuracy is tracked per epoch; the best parameters are kept and training
//! stops after `patience` epochs without improvement.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::loss::{batch_loss_and_grad, BatchPair, LossError, PairBatch, PairMasks, RelativeLabel};
use crate::model::{forward_mean, sample_mask_with, ModelError, OptimizerState, ParameterSet};
use crate::rng;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no training pairs")]
    NoPairs,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("pair references sample index {0} outside the dataset")]
    BadIndex(usize),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub patience: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 32,
            learning_rate: crate::model::DEFAULT_LEARNING_RATE,
            patience: Some(20),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(TrainError::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        Ok(())
    }
}

/// A labeled pair addressed by dataset indices.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IndexedPair {
    pub left: usize,
    pub right: usize,
    pub label: RelativeLabel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_accuracy: Option<f64>,
    pub final_train_loss: f64,
    pub stopped_early: bool,
}

/// Accuracy of the deterministic forward pass on `(higher, lower)` index pairs.
pub fn validation_accuracy(params: &ParameterSet, dataset: &Dataset, pairs: &[(usize, usize)]) -> Result<f64, ModelError> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let mut cache = vec![None; dataset.len()];
    let mut score = |k: usize| -> Result<f64, ModelError> {
        if let Some(s) = cache[k] {
            return Ok(s);
        }
        let s = forward_mean(params, dataset.features(k))?;
        cache[k] = Some(s);
        Ok(s)
    };
    let mut hits = 0usize;
    for &(hi, lo) in pairs {
        if score(hi)? > score(lo)? {
            hits += 1;
        }
    }
    Ok(hits as f64 / pairs.len() as f64)
}

pub fn train(
    mut params: ParameterSet,
    dataset: &Dataset,
    pairs: &[IndexedPair],
    validation: &[(usize, usize)],
    config: &TrainConfig,
) -> Result<(ParameterSet, TrainReport), TrainError> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(TrainError::NoPairs);
    }
    if let Some(p) = pairs.iter().find(|p| p.left >= dataset.len() || p.right >= dataset.len()) {
        return Err(TrainError::BadIndex(p.left.max(p.right)));
    }
    let lambda = params.config.weight_decay;
    let mut opt = OptimizerState::new(&params, config.learning_rate);
    let mut rng = rng::rng(config.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();

    let track = !validation.is_empty();
    let mut best = if track { Some((validation_accuracy(&params, dataset, validation)?, params.clone())) } else { None };
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut epochs_run = 0;
    let mut last_loss = f64::NAN;
    let mut stopped_early = false;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch = PairBatch::new(
                chunk
                    .iter()
                    .map(|&k| {
                        let p = pairs[k];
                        BatchPair { left: dataset.features(p.left), right: dataset.features(p.right), label: p.label }
                    })
                    .collect(),
            )?;
            let masks: Vec<PairMasks> = chunk
                .iter()
                .map(|_| PairMasks {
                    left: sample_mask_with(&params.config, &mut rng),
                    right: sample_mask_with(&params.config, &mut rng),
                })
                .collect();
            let (loss, grad) = batch_loss_and_grad(&params, &batch, &masks, lambda)?;
            epoch_loss += loss;
            opt.apply(&mut params, &grad)?;
        }
        epochs_run = epoch;
        last_loss = epoch_loss / pairs.len() as f64;

        if let Some((best_acc, best_params)) = best.as_mut() {
            let acc = validation_accuracy(&params, dataset, validation)?;
            if acc > *best_acc {
                *best_acc = acc;
                *best_params = params.clone();
                best_epoch = epoch;
                since_best = 0;
            } else {
                since_best += 1;
                if config.patience.is_some_and(|p| since_best >= p) {
                    stopped_early = true;
                    break;
                }
            }
        }
    }

    let report_best = best.as_ref().map(|b| b.0);
    let params = match best {
        // Keep the final weights when validation never improved on the initial ones.
        Some((_, p)) if best_epoch > 0 => p,
        _ => params,
    };
    Ok((
        params,
        TrainReport {
            epochs_run,
            best_epoch: if track { best_epoch } else { epochs_run },
            best_val_accuracy: report_best,
            final_train_loss: last_loss,
            stopped_early,
        },
    ))
}
