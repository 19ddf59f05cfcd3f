//! Shared training loop: epoch shuffling, minibatching, divergence
//! detection, optional early stopping, and timing. The CP and neural models
//! plug in through [`Trainable`] so they all get identical loop semantics.
//!
//! Targets are standardized (z-scored) before any model sees them;
//! [`ValueStats`] carries the mean and population standard deviation needed
//! to map predictions back to original units.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Rng;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(
        "training diverged at epoch {epoch}: non-finite loss at learning rate {learning_rate}"
    )]
    Divergence { epoch: usize, learning_rate: f64 },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training data: {0}")]
    Data(String),
}

/// Errors shared by every model's predict path.
#[derive(Debug, Error)]
pub enum PredictError {
    #[error("coordinate has {got} modes, model has {want}")]
    ArityMismatch { got: usize, want: usize },
    #[error("index {index} out of bounds on mode {mode} (extent {extent})")]
    OutOfBounds {
        mode: usize,
        index: usize,
        extent: usize,
    },
    #[error("value statistics unbound; train the model before predicting")]
    StatsUnbound,
}

/// Target mean and population standard deviation. A default-constructed
/// value (std 0) is "unbound": models refuse to predict with it.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValueStats {
    pub mean: f64,
    pub std: f64,
}

/// Standard deviations below this floor are clamped so constant targets do
/// not divide by zero.
pub const STD_FLOOR: f64 = 1e-12;

impl ValueStats {
    pub fn from_values(values: &[f64]) -> Self {
        assert!(!values.is_empty(), "stats need at least one value");
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        ValueStats {
            mean,
            std: var.sqrt().max(STD_FLOOR),
        }
    }

    pub fn is_bound(&self) -> bool {
        self.std > 0.0
    }

    #[inline]
    pub fn standardize(&self, y: f64) -> f64 {
        (y - self.mean) / self.std
    }

    #[inline]
    pub fn destandardize(&self, z: f64) -> f64 {
        self.mean + self.std * z
    }
}

/// What one training run did. Loss values are means of per-batch objectives
/// within each epoch; `val_mae` is empty when no validation set was given.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_loss: Vec<f64>,
    pub val_mae: Vec<f64>,
    pub train_seconds: f64,
    pub epochs_run: usize,
    /// Content digest of the final parameters, for checkpoint audits.
    pub snapshot_id: String,
}

/// Model-side hooks for [`run_training`]. `batch_step` applies one optimizer
/// update for the given entry indices and returns that batch's objective.
pub trait Trainable {
    type Snapshot;

    fn batch_step(&mut self, indices: &[usize]) -> f64;

    /// Validation MAE in original units, if a validation set is attached.
    fn val_mae(&mut self) -> Option<f64>;

    fn snapshot(&self) -> Self::Snapshot;

    fn restore(&mut self, snapshot: Self::Snapshot);

    fn params_digest(&self) -> String;
}

#[derive(Clone, Copy, Debug)]
pub struct TrainLoop {
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: Option<usize>,
    /// Echoed in divergence errors so logs name the failing configuration.
    pub learning_rate: f64,
}

/// Runs the epoch/batch loop over `n_entries` training entries.
///
/// Each epoch shuffles the entry indices with `rng` and walks them in
/// batches. A non-finite batch objective aborts with a divergence error.
/// When `patience` is set and the model reports validation MAE, training
/// stops after that many epochs without improvement and the best snapshot
/// is restored.
pub fn run_training<M: Trainable>(
    model: &mut M,
    n_entries: usize,
    cfg: &TrainLoop,
    rng: &mut Rng,
) -> Result<TrainReport, TrainError> {
    if n_entries == 0 {
        return Err(TrainError::Data("no training entries".to_string()));
    }
    if cfg.batch_size == 0 {
        return Err(TrainError::InvalidConfig(
            "batch_size must be >= 1".to_string(),
        ));
    }
    let start = Instant::now();
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..n_entries).collect();
    let mut best: Option<(f64, M::Snapshot)> = None;
    let mut epochs_since_improvement = 0usize;

    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let loss = model.batch_step(batch);
            if !loss.is_finite() {
                return Err(TrainError::Divergence {
                    epoch,
                    learning_rate: cfg.learning_rate,
                });
            }
            loss_sum += loss;
            batches += 1;
        }
        report.epoch_loss.push(loss_sum / batches as f64);
        report.epochs_run = epoch;

        if let Some(mae) = model.val_mae() {
            report.val_mae.push(mae);
            if let Some(patience) = cfg.patience {
                let improved = match &best {
                    Some((best_mae, _)) => mae < *best_mae,
                    None => true,
                };
                if improved {
                    best = Some((mae, model.snapshot()));
                    epochs_since_improvement = 0;
                } else {
                    epochs_since_improvement += 1;
                    if epochs_since_improvement >= patience {
                        break;
                    }
                }
            }
        }
    }

    if let Some((_, snapshot)) = best {
        model.restore(snapshot);
    }
    report.train_seconds = start.elapsed().as_secs_f64();
    report.snapshot_id = model.params_digest();
    Ok(report)
}
