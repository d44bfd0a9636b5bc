//! Mini-batch training loop: seeded shuffling, Adam, early stopping on
//! validation loss, best-checkpoint restoration.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::WindowSample;
use crate::eval::mae_mse;
use crate::mixture::{MixtureError, MixtureModel};
use crate::numgrad::{clip_global_norm, AdamConfig, AdamError, AdamState, Graph};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty training partition")]
    EmptyTrain,
    #[error("empty validation partition")]
    EmptyVal,
    #[error("invalid train config: {0}")]
    BadConfig(String),
    #[error("epoch {epoch}, batch {batch}: {source}")]
    Step {
        epoch: usize,
        batch: usize,
        source: MixtureError,
    },
    #[error(transparent)]
    Mixture(#[from] MixtureError),
    #[error(transparent)]
    Adam(#[from] AdamError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EarlyStopMetric {
    /// Validation value of the configured training loss (default).
    Loss,
    /// Validation MAE of the combined forecast.
    Mae,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Shuffle train windows each epoch (validation order is never touched).
    pub shuffle: bool,
    /// Optional global-norm gradient clip for rescue runs; off by default.
    pub grad_clip: Option<f64>,
    pub early_stop_metric: EarlyStopMetric,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 10,
            patience: 3,
            batch_size: 8,
            learning_rate: 1e-4,
            seed: 0,
            shuffle: true,
            grad_clip: None,
            early_stop_metric: EarlyStopMetric::Loss,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch_size must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(TrainError::BadConfig("max_epochs must be at least 1".into()));
        }
        if self.patience > self.max_epochs {
            return Err(TrainError::BadConfig(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::BadConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    /// 1-based epoch number.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainRecord {
    pub epochs: Vec<EpochStats>,
    /// 1-based epoch whose weights were restored.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    pub wall_clock_seconds: f64,
}

impl TrainRecord {
    /// Flat key-value rendering. Wall-clock time is kept on its own line so
    /// reproducibility checks can compare everything above it.
    pub fn to_text(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::new();
        let _ = writeln!(out, "epochs = {}", self.epochs.len());
        let _ = writeln!(out, "best_epoch = {}", self.best_epoch);
        let _ = writeln!(out, "best_val_loss = {:.12}", self.best_val_loss);
        let _ = writeln!(out, "stopped_early = {}", self.stopped_early);
        for e in &self.epochs {
            let _ = writeln!(out, "epoch.{}.train_loss = {:.12}", e.epoch, e.train_loss);
            let _ = writeln!(out, "epoch.{}.val_loss = {:.12}", e.epoch, e.val_loss);
        }
        let _ = writeln!(out, "wall_clock_seconds = {:.3}", self.wall_clock_seconds);
        out
    }
}

/// Stop when validation has not improved for `patience` consecutive epochs.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: Option<(usize, f64)>,
    since_best: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: None,
            since_best: 0,
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }

    /// Feeds one epoch's validation value; returns `(improved, stop_now)`.
    pub fn observe(&mut self, epoch: usize, value: f64) -> (bool, bool) {
        let improved = match self.best {
            None => true,
            Some((_, best)) => value < best,
        };
        if improved {
            self.best = Some((epoch, value));
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        (improved, self.patience > 0 && self.since_best >= self.patience)
    }
}

/// Mean of the configured training loss over all windows; no gradients, no
/// parameter mutation.
pub fn validate(model: &MixtureModel, windows: &[WindowSample]) -> Result<f64, TrainError> {
    if windows.is_empty() {
        return Err(TrainError::EmptyVal);
    }
    let mut acc = 0.0;
    for chunk in windows.chunks(64) {
        let mut graph = Graph::new();
        let (loss, _) = model.batch_loss(&mut graph, chunk)?;
        acc += graph
            .evaluate(loss)
            .map_err(MixtureError::from)?
            .item()
            * chunk.len() as f64;
    }
    Ok(acc / windows.len() as f64)
}

/// Validation MAE of the combined forecast, for the alternate early-stop
/// metric.
pub fn validate_mae(model: &MixtureModel, windows: &[WindowSample]) -> Result<f64, TrainError> {
    if windows.is_empty() {
        return Err(TrainError::EmptyVal);
    }
    let mut preds = Vec::with_capacity(windows.len());
    let mut truths = Vec::with_capacity(windows.len());
    for w in windows {
        preds.push(model.predict(&w.input)?.combined_mean);
        truths.push(w.target.clone());
    }
    let (mae, _) = mae_mse(&preds, &truths).map_err(|e| TrainError::BadConfig(e.to_string()))?;
    Ok(mae)
}

/// Runs the full loop and leaves the best-validation parameters on the model.
pub fn train(
    model: &mut MixtureModel,
    train_windows: &[WindowSample],
    val_windows: &[WindowSample],
    config: &TrainConfig,
) -> Result<TrainRecord, TrainError> {
    config.validate()?;
    if train_windows.is_empty() {
        return Err(TrainError::EmptyTrain);
    }
    if val_windows.is_empty() {
        return Err(TrainError::EmptyVal);
    }
    let started = std::time::Instant::now();
    let mut adam = AdamState::new(AdamConfig::new(config.learning_rate));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut stopper = EarlyStopper::new(config.patience);
    let mut best_params = model.params.clone();
    let mut epochs = Vec::new();
    let mut stopped_early = false;

    for epoch in 1..=config.max_epochs {
        let mut order: Vec<usize> = (0..train_windows.len()).collect();
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        let mut loss_acc = 0.0;
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<WindowSample> =
                chunk.iter().map(|&i| train_windows[i].clone()).collect();
            let step = |source: MixtureError| TrainError::Step {
                epoch,
                batch: batch_idx,
                source,
            };
            let mut graph = Graph::new();
            let (loss, binding) = model.batch_loss(&mut graph, &batch).map_err(step)?;
            let loss_value = graph
                .evaluate(loss)
                .map_err(|e| step(MixtureError::from(e)))?
                .item();
            let node_grads = graph
                .backward(loss)
                .map_err(|e| step(MixtureError::from(e)))?;
            let mut grads = binding.grads_by_name(node_grads);
            if let Some(max_norm) = config.grad_clip {
                clip_global_norm(&mut grads, max_norm);
            }
            adam.step(&mut model.params, &grads)?;
            loss_acc += loss_value * chunk.len() as f64;
        }
        let train_loss = loss_acc / train_windows.len() as f64;
        let val_loss = match config.early_stop_metric {
            EarlyStopMetric::Loss => validate(model, val_windows)?,
            EarlyStopMetric::Mae => validate_mae(model, val_windows)?,
        };
        epochs.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
        });
        let (improved, stop) = stopper.observe(epoch, val_loss);
        if improved {
            best_params = model.params.clone();
        }
        if stop {
            stopped_early = true;
            break;
        }
    }

    let (best_epoch, best_val_loss) = stopper.best().expect("at least one epoch ran");
    model.params = best_params;
    Ok(TrainRecord {
        epochs,
        best_epoch,
        best_val_loss,
        stopped_early,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patience_counts_consecutive_non_improvements() {
        // Validation losses [5, 4, 4.1, 4.2, 4.3] with patience 3 stop after
        // epoch 5 and keep epoch 2.
        let mut s = EarlyStopper::new(3);
        let seq = [5.0, 4.0, 4.1, 4.2, 4.3, 3.0];
        let mut stopped_at = None;
        for (i, &v) in seq.iter().enumerate() {
            let (_, stop) = s.observe(i + 1, v);
            if stop {
                stopped_at = Some(i + 1);
                break;
            }
        }
        assert_eq!(stopped_at, Some(5));
        assert_eq!(s.best(), Some((2, 4.0)));
    }

    #[test]
    fn improvement_resets_the_counter() {
        let mut s = EarlyStopper::new(2);
        assert_eq!(s.observe(1, 5.0), (true, false));
        assert_eq!(s.observe(2, 5.5), (false, false));
        assert_eq!(s.observe(3, 4.0), (true, false));
        assert_eq!(s.observe(4, 4.5), (false, false));
        assert_eq!(s.observe(5, 4.4), (false, true));
    }

    #[test]
    fn config_rejects_patience_beyond_epochs() {
        let cfg = TrainConfig {
            patience: 11,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(TrainError::BadConfig(_))));
    }
}
