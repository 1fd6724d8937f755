//! Noise schedule, forward process, decoupled training and the reverse samplers.
//!
//! Steps are indexed `t = 1..=T` with `alpha_bar(0) = 1`. The reverse loop runs
//! from `t = T` down to `t = 1` and its last step returns the (corrected) clean
//! estimate without noise.

mod checkpoint;
mod sample;
mod train;

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use sample::{
    guidance_gradient, guidance_gradient_batch, sample_guided, sample_unguided, GuidanceConfig,
    GuidanceMode, CHAIN_CHUNK,
};
pub use train::{train_decoupled, DecoupledModel, TrainConfig, TrainReport};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::DataError;
use crate::neural::{Mlp, NeuralError};

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("invalid noise schedule: {0}")]
    Schedule(String),
    #[error("non-finite {what} at step {step}")]
    NonFinite { step: usize, what: &'static str },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("model has {expected} buses, case has {got}")]
    CaseMismatch { expected: usize, got: usize },
}

/// Hyperparameters that fully determine a [`NoiseSchedule`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub t_max: usize,
    pub beta_1: f64,
    pub beta_t: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        ScheduleParams {
            t_max: 1000,
            beta_1: 1e-4,
            beta_t: 2e-2,
        }
    }
}

/// Linear-beta schedule. Vectors are stored with index 0 holding `t = 0`, where
/// `alpha_bar = 1` and `beta = sigma = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub params: ScheduleParams,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    /// `1 - alpha_bar`, accumulated without cancellation.
    one_minus_alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

pub fn make_schedule(t_max: usize, beta_1: f64, beta_t: f64) -> Result<NoiseSchedule, DiffusionError> {
    if t_max == 0 {
        return Err(DiffusionError::Schedule("T must be at least 1".into()));
    }
    if !(beta_1 > 0.0 && beta_1 <= beta_t && beta_t < 1.0) {
        return Err(DiffusionError::Schedule(format!(
            "need 0 < beta_1 <= beta_T < 1, got {beta_1}, {beta_t}"
        )));
    }
    let mut beta = vec![0.0];
    for t in 1..=t_max {
        let frac = if t_max == 1 {
            0.0
        } else {
            (t - 1) as f64 / (t_max - 1) as f64
        };
        beta.push(beta_1 + (beta_t - beta_1) * frac);
    }
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = vec![1.0];
    let mut omab = vec![0.0];
    for t in 1..=t_max {
        alpha_bar.push(alpha_bar[t - 1] * alpha[t]);
        omab.push(omab[t - 1] + alpha_bar[t - 1] * beta[t]);
    }
    let mut sigma = vec![0.0];
    for t in 1..=t_max {
        sigma.push((beta[t] * omab[t - 1] / omab[t]).sqrt());
    }
    Ok(NoiseSchedule {
        params: ScheduleParams {
            t_max,
            beta_1,
            beta_t,
        },
        beta,
        alpha,
        alpha_bar,
        one_minus_alpha_bar: omab,
        sigma,
    })
}

impl NoiseSchedule {
    pub fn from_params(p: &ScheduleParams) -> Result<Self, DiffusionError> {
        make_schedule(p.t_max, p.beta_1, p.beta_t)
    }

    pub fn t_max(&self) -> usize {
        self.params.t_max
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn one_minus_alpha_bar(&self, t: usize) -> f64 {
        self.one_minus_alpha_bar[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    /// Coefficients `(c_x, c_0)` of `x_t` and of the clean estimate in the
    /// posterior mean at step `t`.
    pub fn posterior_coefficients(&self, t: usize) -> (f64, f64) {
        let d = self.one_minus_alpha_bar[t];
        let c_x = self.alpha[t].sqrt() * self.one_minus_alpha_bar[t - 1] / d;
        let c_0 = self.alpha_bar[t - 1].sqrt() * self.beta[t] / d;
        (c_x, c_0)
    }
}

/// `x_t = sqrt(alpha_bar_t) x_0 + sqrt(1 - alpha_bar_t) eps`.
pub fn forward_diffuse(x0: &[f64], t: usize, eps: &[f64], s: &NoiseSchedule) -> Vec<f64> {
    let a = s.alpha_bar(t).sqrt();
    let b = s.one_minus_alpha_bar(t).sqrt();
    x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect()
}

/// Clean-sample estimate from a noisy sample and a noise prediction.
pub fn tweedie_from_noise(x_t: &[f64], eps_hat: &[f64], t: usize, s: &NoiseSchedule) -> Vec<f64> {
    let a = s.alpha_bar(t).sqrt();
    let b = s.one_minus_alpha_bar(t).sqrt();
    x_t.iter().zip(eps_hat).map(|(x, e)| (x - b * e) / a).collect()
}

/// Clean-sample estimate using `denoiser` for the noise prediction.
pub fn tweedie_estimate(
    x_t: &[f64],
    t: usize,
    denoiser: &Mlp,
    s: &NoiseSchedule,
) -> Result<Vec<f64>, DiffusionError> {
    let eps = denoiser.forward(x_t, t, s.t_max())?;
    Ok(tweedie_from_noise(x_t, &eps, t, s))
}

pub(crate) fn tweedie_batch(
    x_t: ArrayView2<f64>,
    eps_hat: &Array2<f64>,
    t: usize,
    s: &NoiseSchedule,
) -> Array2<f64> {
    let a = s.alpha_bar(t).sqrt();
    let b = s.one_minus_alpha_bar(t).sqrt();
    (&x_t - &(eps_hat * b)) / a
}

/// One ancestral step. `z` is ignored at `t = 1`.
pub fn posterior_step(x_t: &[f64], x0_hat: &[f64], t: usize, z: &[f64], s: &NoiseSchedule) -> Vec<f64> {
    let (c_x, c_0) = s.posterior_coefficients(t);
    let sig = if t == 1 { 0.0 } else { s.sigma(t) };
    x_t.iter()
        .zip(x0_hat)
        .zip(z)
        .map(|((x, x0), z)| c_x * x + c_0 * x0 + sig * z)
        .collect()
}

/// Splits a `(p, q, v, theta)` vector into `(p, theta)` and `(q, v)`.
pub fn split(x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let b = x.len() / 4;
    let mut x1 = Vec::with_capacity(2 * b);
    x1.extend_from_slice(&x[..b]);
    x1.extend_from_slice(&x[3 * b..]);
    (x1, x[b..3 * b].to_vec())
}

/// Inverse of [`split`].
pub fn concat(x1: &[f64], x2: &[f64]) -> Vec<f64> {
    let b = x1.len() / 2;
    let mut x = Vec::with_capacity(4 * b);
    x.extend_from_slice(&x1[..b]);
    x.extend_from_slice(x2);
    x.extend_from_slice(&x1[b..]);
    x
}

/// Column indices of the two halves within the `4B` layout.
pub(crate) fn half_columns(n_bus: usize) -> (Vec<usize>, Vec<usize>) {
    let b = n_bus;
    let first = (0..b).chain(3 * b..4 * b).collect();
    let second = (b..3 * b).collect();
    (first, second)
}

pub(crate) fn split_batch(x: &Array2<f64>, n_bus: usize) -> (Array2<f64>, Array2<f64>) {
    let (c1, c2) = half_columns(n_bus);
    (
        x.select(ndarray::Axis(1), &c1),
        x.select(ndarray::Axis(1), &c2),
    )
}

pub(crate) fn concat_batch(x1: &Array2<f64>, x2: &Array2<f64>, n_bus: usize) -> Array2<f64> {
    let (c1, c2) = half_columns(n_bus);
    let mut x = Array2::zeros((x1.nrows(), 4 * n_bus));
    for (k, &c) in c1.iter().enumerate() {
        x.column_mut(c).assign(&x1.column(k));
    }
    for (k, &c) in c2.iter().enumerate() {
        x.column_mut(c).assign(&x2.column(k));
    }
    x
}
