// SPDX-License-Identifier: Apache-2.0

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lstm::{loss, loss_and_gradient_refs};
use super::{LstmParams, PredictorError, Sequence, FEATURE_COUNT};

/// Step-size recovery after an accepted epoch, capped at the configured rate.
const LR_GROWTH: f64 = 1.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Global-norm bound applied to every update.
    pub gradient_clip: f64,
    /// Trailing history fed to the model (30 days).
    pub window_hours: usize,
    pub hidden_size: usize,
    /// Sequences per gradient step.
    pub batch_size: usize,
    /// Length of the training sequences cut from the window.
    pub sequence_hours: usize,
    /// Offset between sequence starts. Keep it coprime with 24 so sequences
    /// start at every hour of the day.
    pub stride_hours: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 200,
            seed: 0,
            gradient_clip: 5.0,
            window_hours: 720,
            hidden_size: 16,
            batch_size: 8,
            sequence_hours: 48,
            stride_hours: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PredictorError> {
        let bad = |msg: &str| Err(PredictorError::InvalidConfig(msg.to_owned()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.gradient_clip > 0.0 && self.gradient_clip.is_finite()) {
            return bad("gradient_clip must be positive");
        }
        if self.hidden_size == 0 {
            return bad("hidden_size must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.window_hours < 2 || self.sequence_hours < 2 || self.stride_hours == 0 {
            return bad("window and sequence lengths must be at least 2 hours");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub params: LstmParams,
    /// Loss of the kept parameters: the starting loss, then one entry per
    /// epoch. Never increases.
    pub losses: Vec<f64>,
    pub rejected_epochs: usize,
    pub final_learning_rate: f64,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("starting loss is always recorded")
    }
}

/// Mini-batch gradient descent with global-norm clipping.
///
/// Each epoch visits every sequence once in a seeded shuffle order. An epoch
/// whose end-of-epoch loss exceeds the best loss so far is discarded and the
/// learning rate halved, so the returned parameters are the best seen and
/// the loss history is non-increasing. Accepted epochs let the rate grow
/// back towards the configured value.
pub fn train(p0: &LstmParams, data: &[Sequence], cfg: &TrainConfig) -> Result<TrainReport, PredictorError> {
    cfg.validate()?;
    let mut best = p0.clone();
    let mut best_loss = loss(&best, data)?;
    if !best_loss.is_finite() {
        return Err(PredictorError::DivergenceDetected);
    }
    let mut losses = Vec::with_capacity(cfg.epochs + 1);
    losses.push(best_loss);
    let mut lr = cfg.learning_rate;
    let mut rejected = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut current = best.clone();
        let mut finite = true;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sequence> = chunk.iter().map(|&i| &data[i]).collect();
            let (_, mut grad) = loss_and_gradient_refs(&current, &batch)?;
            let norm = grad.norm();
            if !norm.is_finite() {
                finite = false;
                break;
            }
            if norm > cfg.gradient_clip {
                grad.scale(cfg.gradient_clip / norm);
            }
            current.add_scaled(&grad, -lr);
        }
        let epoch_loss = if finite { loss(&current, data)? } else { f64::NAN };
        if epoch_loss.is_finite() && epoch_loss <= best_loss {
            best = current;
            best_loss = epoch_loss;
            lr = (lr * LR_GROWTH).min(cfg.learning_rate);
        } else {
            rejected += 1;
            lr *= 0.5;
        }
        losses.push(best_loss);
    }

    Ok(TrainReport {
        params: best,
        losses,
        rejected_epochs: rejected,
        final_learning_rate: lr,
    })
}

/// Trains from a fresh uniform initialization seeded by `cfg.seed`.
pub fn train_from_seed(data: &[Sequence], cfg: &TrainConfig) -> Result<TrainReport, PredictorError> {
    cfg.validate()?;
    let p0 = LstmParams::init(cfg.hidden_size, FEATURE_COUNT, cfg.seed);
    train(&p0, data, cfg)
}
