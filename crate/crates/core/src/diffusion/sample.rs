use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{concat_batch, split_batch, tweedie_batch, DecoupledModel, DiffusionError};
use crate::acpf::{grad_residual_g, grad_residual_h, PowerFlowRecord};
use crate::datagen::Dataset;
use crate::grid::GridCase;

/// Chains are processed in fixed-size chunks, so results do not depend on the
/// number of worker threads.
pub const CHAIN_CHUNK: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GuidanceMode {
    /// Back-propagates through the denoiser when mapping the correction to `x_t`.
    ExactVjp,
    /// Treats the denoiser output as constant in `x_t`.
    Approximate,
}

impl GuidanceMode {
    pub fn as_str(self) -> &'static str {
        match self {
            GuidanceMode::ExactVjp => "exact-vjp",
            GuidanceMode::Approximate => "approximate",
        }
    }
}

impl fmt::Display for GuidanceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GuidanceMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "exact-vjp" => Ok(GuidanceMode::ExactVjp),
            "approximate" => Ok(GuidanceMode::Approximate),
            other => Err(format!("unknown guidance mode {other:?} (exact-vjp|approximate)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    pub lambda: f64,
    pub mode: GuidanceMode,
    pub include_inequalities: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            lambda: 0.0,
            mode: GuidanceMode::ExactVjp,
            include_inequalities: true,
        }
    }
}

impl GuidanceConfig {
    /// Guidance scale at step `t`; constant for now.
    pub fn lambda_at(&self, _t: usize) -> f64 {
        self.lambda
    }
}

fn check_case(model: &DecoupledModel, case: &GridCase) -> Result<(), DiffusionError> {
    if case.n_bus() != model.n_bus {
        return Err(DiffusionError::CaseMismatch {
            expected: model.n_bus,
            got: case.n_bus(),
        });
    }
    Ok(())
}

/// Gradient with respect to the normalized noisy sample `x_t` of the constraint
/// residuals evaluated at the denormalized clean estimate, one row per chain.
pub fn guidance_gradient_batch(
    x_t: &Array2<f64>,
    x0_hat: &Array2<f64>,
    t: usize,
    model: &DecoupledModel,
    case: &GridCase,
    config: &GuidanceConfig,
) -> Result<Array2<f64>, DiffusionError> {
    check_case(model, case)?;
    let jac = model.stats.denorm_jacobian_diag();
    let mut cot = Array2::zeros(x0_hat.raw_dim());
    for (r, row) in x0_hat.axis_iter(Axis(0)).enumerate() {
        let phys = model.stats.denormalize(row.as_slice().expect("standard layout"));
        let rec = PowerFlowRecord::from_flat(&phys);
        let mut g = grad_residual_h(&rec, case);
        if config.include_inequalities {
            for (gk, hk) in g.iter_mut().zip(grad_residual_g(&rec, case)) {
                *gk += hk;
            }
        }
        for (k, gk) in g.into_iter().enumerate() {
            cot[[r, k]] = gk * jac[k];
        }
    }
    let s = &model.schedule;
    let a = s.alpha_bar(t).sqrt();
    let b = s.one_minus_alpha_bar(t).sqrt();
    let (c1, c2) = split_batch(&cot, model.n_bus);
    let (out1, out2) = match config.mode {
        GuidanceMode::Approximate => (c1 / a, c2 / a),
        GuidanceMode::ExactVjp => {
            let (x1, x2) = split_batch(x_t, model.n_bus);
            let tv = vec![t; x_t.nrows()];
            let v1 = model
                .denoiser_1
                .input_vjp_batch(x1.view(), &tv, s.t_max(), c1.view())?;
            let v2 = model
                .denoiser_2
                .input_vjp_batch(x2.view(), &tv, s.t_max(), c2.view())?;
            ((c1 - v1 * b) / a, (c2 - v2 * b) / a)
        }
    };
    Ok(concat_batch(&out1, &out2, model.n_bus))
}

/// Single-chain form of [`guidance_gradient_batch`].
pub fn guidance_gradient(
    x_t: &[f64],
    x0_hat: &[f64],
    t: usize,
    model: &DecoupledModel,
    case: &GridCase,
    config: &GuidanceConfig,
) -> Result<Vec<f64>, DiffusionError> {
    let xt = Array2::from_shape_vec((1, x_t.len()), x_t.to_vec()).expect("row");
    let x0 = Array2::from_shape_vec((1, x0_hat.len()), x0_hat.to_vec()).expect("row");
    Ok(guidance_gradient_batch(&xt, &x0, t, model, case, config)?
        .into_raw_vec_and_offset()
        .0)
}

fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64);
    rng
}

fn fill_normal(x: &mut Array2<f64>, rngs: &mut [ChaCha8Rng]) {
    for (mut row, rng) in x.rows_mut().into_iter().zip(rngs.iter_mut()) {
        row.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
    }
}

fn run_chunk(
    model: &DecoupledModel,
    guide: Option<(&GridCase, &GuidanceConfig)>,
    seed: u64,
    first: usize,
    count: usize,
) -> Result<Vec<Vec<f64>>, DiffusionError> {
    let s = &model.schedule;
    let t_max = s.t_max();
    let width = 4 * model.n_bus;
    let mut rngs: Vec<ChaCha8Rng> = (first..first + count).map(|c| chain_rng(seed, c)).collect();
    let mut x = Array2::zeros((count, width));
    fill_normal(&mut x, &mut rngs);
    let mut z = Array2::zeros((count, width));
    for t in (1..=t_max).rev() {
        let tv = vec![t; count];
        let (x1, x2) = split_batch(&x, model.n_bus);
        let e1 = model.denoiser_1.forward_batch(x1.view(), &tv, t_max)?;
        let e2 = model.denoiser_2.forward_batch(x2.view(), &tv, t_max)?;
        let h1 = tweedie_batch(x1.view(), &e1, t, s);
        let h2 = tweedie_batch(x2.view(), &e2, t, s);
        let mut x0 = concat_batch(&h1, &h2, model.n_bus);
        if let Some((case, cfg)) = guide {
            let lambda = cfg.lambda_at(t);
            if lambda != 0.0 {
                let g = guidance_gradient_batch(&x, &x0, t, model, case, cfg)?;
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(DiffusionError::NonFinite {
                        step: t,
                        what: "guidance gradient",
                    });
                }
                x0.scaled_add(-lambda, &g);
            }
        }
        let (c_x, c_0) = s.posterior_coefficients(t);
        let mut next = x * c_x;
        next.scaled_add(c_0, &x0);
        if t > 1 {
            fill_normal(&mut z, &mut rngs);
            next.scaled_add(s.sigma(t), &z);
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(DiffusionError::NonFinite {
                step: t,
                what: "sample trajectory",
            });
        }
        x = next;
    }
    Ok(x
        .rows()
        .into_iter()
        .map(|row| model.stats.denormalize(row.as_slice().expect("standard layout")))
        .collect())
}

fn run_chains(
    model: &DecoupledModel,
    guide: Option<(&GridCase, &GuidanceConfig)>,
    n: usize,
    seed: u64,
) -> Result<Dataset, DiffusionError> {
    if let Some((case, _)) = guide {
        check_case(model, case)?;
    }
    let starts: Vec<usize> = (0..n).step_by(CHAIN_CHUNK).collect();
    let chunks: Vec<Result<Vec<Vec<f64>>, DiffusionError>> = starts
        .par_iter()
        .map(|&first| run_chunk(model, guide, seed, first, CHAIN_CHUNK.min(n - first)))
        .collect();
    let mut records = Vec::with_capacity(n);
    for chunk in chunks {
        records.extend(chunk?.iter().map(|r| PowerFlowRecord::from_flat(r)));
    }
    let mut d = Dataset::new(guide.map_or(String::new(), |(c, _)| c.name.clone()), records);
    d.seed = Some(seed);
    Ok(d)
}

/// Plain ancestral sampling of `n` records, denormalized.
pub fn sample_unguided(model: &DecoupledModel, n: usize, seed: u64) -> Result<Dataset, DiffusionError> {
    run_chains(model, None, n, seed)
}

/// Ancestral sampling with the clean estimate corrected along the constraint
/// residual gradient at every step. With `lambda = 0` this is identical to
/// [`sample_unguided`].
pub fn sample_guided(
    model: &DecoupledModel,
    case: &GridCase,
    n: usize,
    seed: u64,
    config: &GuidanceConfig,
) -> Result<Dataset, DiffusionError> {
    run_chains(model, Some((case, config)), n, seed)
}
