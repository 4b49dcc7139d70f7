// SPDX-License-Identifier: Apache-2.0

//! Hourly relapse-probability model: feature extraction over a trailing
//! window, a from-scratch LSTM, gradient-descent training and checkpoints.

mod checkpoint;
mod features;
mod forecast;
mod lstm;
mod train;

use thiserror::Error;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use features::{
    ceil_hour, extract_features, floor_hour, hour_features, training_sequences, FeatureVector, FEATURE_COUNT,
};
pub use forecast::{next_hour_backtest, predict_next_hours, Forecast, HourlyRisk, MIN_HISTORY_HOURS};
pub use lstm::{
    forward, forward_with_state, gradient, loss, loss_and_gradient, loss_and_gradient_sequential, lstm_step,
    parameter_count, readout, rmse, sigmoid, Gate, LstmParams, LstmState, Sequence,
};
pub use train::{train, train_from_seed, TrainConfig, TrainReport};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PredictorError {
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("empty input sequence")]
    EmptySequence,
    #[error("feature window has no hours")]
    EmptyWindow,
    #[error("{labels} labels do not align with {inputs} inputs (need inputs - 1)")]
    AlignmentError { inputs: usize, labels: usize },
    #[error("training loss became non-finite")]
    DivergenceDetected,
    #[error("only {available} hours of history, need at least {required}")]
    InsufficientHistory { available: i64, required: i64 },
    #[error("horizon must be at least one hour")]
    InvalidHorizon,
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
