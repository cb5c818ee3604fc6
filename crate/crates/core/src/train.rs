//! Mini-batch training with gradient accumulation and early stopping.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamConfig};
use crate::metrics::evaluate;
use crate::model::{Model, ModelConfig, ModelError};
use crate::scene_graph::SceneSequence;
use crate::seed::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Sequences per optimizer step.
    pub batch_size: usize,
    /// Stop after this many epochs without a validation-accuracy gain.
    pub patience: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 60, batch_size: 8, patience: 10, learning_rate: 1e-3, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the best validation accuracy (initialization counts as epoch 0).
    pub model: Model,
    pub initial_loss: f64,
    pub initial_val_accuracy: f64,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

impl TrainOutcome {
    pub fn loss_curve(&self) -> Vec<f64> {
        std::iter::once(self.initial_loss).chain(self.history.iter().map(|r| r.train_loss)).collect()
    }
}

pub fn mean_loss(model: &Model, sequences: &[SceneSequence]) -> Result<f64, ModelError> {
    let losses: Vec<f64> = sequences.par_iter().map(|s| model.loss(s)).collect::<Result<_, _>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// Trains a freshly initialized `model_config` model.
pub fn train(
    model_config: &ModelConfig,
    train_set: &[SceneSequence],
    val_set: &[SceneSequence],
    config: &TrainConfig,
) -> Result<TrainOutcome, ModelError> {
    train_from(Model::new(model_config.clone())?, train_set, val_set, config)
}

pub fn train_from(
    mut model: Model,
    train_set: &[SceneSequence],
    val_set: &[SceneSequence],
    config: &TrainConfig,
) -> Result<TrainOutcome, ModelError> {
    if train_set.is_empty() {
        return Err(ModelError::Training("empty training set".into()));
    }
    if config.batch_size == 0 {
        return Err(ModelError::Training("batch_size must be positive".into()));
    }
    let mut adam = Adam::new(AdamConfig { learning_rate: config.learning_rate, ..AdamConfig::default() })?;
    let initial_loss = mean_loss(&model, train_set)?;
    let val_accuracy = |m: &Model| -> Result<f64, ModelError> {
        if val_set.is_empty() {
            Ok(0.0)
        } else {
            Ok(evaluate(m, val_set, None)?.overall_accuracy)
        }
    };
    let initial_val_accuracy = val_accuracy(&model)?;
    log::info!("initial train loss {initial_loss:.4}, val acc {initial_val_accuracy:.3}");

    let mut best = model.params.clone();
    let mut best_epoch = 0;
    let mut best_val_accuracy = initial_val_accuracy;
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &format!("train.shuffle.{epoch}")));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let results: Vec<_> = batch
                .par_iter()
                .map(|&i| model.loss_and_grads(&train_set[i]))
                .collect::<Result<_, _>>()?;
            let scale = 1.0 / batch.len() as f64;
            for (loss, grads) in &results {
                if !loss.is_finite() {
                    return Err(ModelError::Training(format!("non-finite loss {loss} in epoch {epoch}")));
                }
                total += loss;
                model.params.accumulate_named(grads, scale)?;
            }
            adam.step(&mut model.params)?;
        }
        let train_loss = total / train_set.len() as f64;
        let val = val_accuracy(&model)?;
        log::info!("epoch {epoch}: train loss {train_loss:.4}, val acc {val:.3}");
        history.push(EpochRecord { epoch, train_loss, val_accuracy: val });
        if val > best_val_accuracy {
            best_val_accuracy = val;
            best_epoch = epoch;
            best = model.params.clone();
        } else if epoch - best_epoch >= config.patience {
            log::info!("early stop after epoch {epoch} (best {best_epoch})");
            break;
        }
    }
    model.params = best;
    Ok(TrainOutcome { model, initial_loss, initial_val_accuracy, history, best_epoch, best_val_accuracy })
}
