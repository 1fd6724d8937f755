//! Similarity, feasibility and downstream-utility measures for synthetic datasets.

mod downstream;
mod mismatch;
mod transport;

pub use downstream::{
    downstream_warmstart, evaluate_predictor, init_predictor, train_predictor, variable_split,
    DownstreamResult, MlpPredictor, Predictor, PredictorConfig, VariableSplit,
};
pub use mismatch::{
    histogram, histogram_export, mismatch_report, mismatch_samples, BusMismatch, Histogram,
    MismatchReport, MismatchSamples, Welford, DEFAULT_BINS,
};
pub use transport::{assignment, euclidean_cost, wasserstein1, wasserstein1_rows, TransportPlan};

use thiserror::Error;

use crate::datagen::DataError;
use crate::neural::NeuralError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("datasets differ in size ({left} vs {right}); subsample explicitly")]
    SizeMismatch { left: usize, right: usize },
    #[error("width mismatch: expected {expected} columns, got {got}")]
    Width { expected: usize, got: usize },
    #[error("empty dataset")]
    Empty,
    #[error("histogram needs at least one bin")]
    Bins,
    #[error("non-finite value in histogram input")]
    NonFinite,
    #[error("non-finite predictor loss at step {step}")]
    Training { step: usize },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
}
