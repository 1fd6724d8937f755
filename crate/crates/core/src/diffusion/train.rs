use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{split_batch, DiffusionError, NoiseSchedule, ScheduleParams};
use crate::datagen::{fit_norm, DataError, Dataset, NormStats};
use crate::neural::{Adam, AdamConfig, Mlp, TimeEmbedding};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Hidden widths per denoiser; `None` means two layers of `max(128, 4B)`.
    pub hidden: Option<Vec<usize>>,
    pub embed_width: usize,
    pub adam: AdamConfig,
    pub schedule: ScheduleParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 30_000,
            batch_size: 128,
            hidden: None,
            embed_width: 32,
            adam: AdamConfig::default(),
            schedule: ScheduleParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn hidden_widths(&self, n_bus: usize) -> Vec<usize> {
        self.hidden
            .clone()
            .unwrap_or_else(|| vec![(4 * n_bus).max(128); 2])
    }
}

/// Two denoisers, one per half of the split record, sharing a schedule and the
/// normalization fitted on the training data.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoupledModel {
    pub n_bus: usize,
    pub schedule: NoiseSchedule,
    pub stats: NormStats,
    /// Predicts the noise on `(p, theta)`.
    pub denoiser_1: Mlp,
    /// Predicts the noise on `(q, v)`.
    pub denoiser_2: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Summed loss of both halves at every step.
    pub loss_trace: Vec<f64>,
}

impl TrainReport {
    /// Mean loss over the `window` steps starting at `start`.
    pub fn window_mean(&self, start: usize, window: usize) -> f64 {
        let end = (start + window).min(self.loss_trace.len());
        let s = &self.loss_trace[start.min(end)..end];
        s.iter().sum::<f64>() / s.len().max(1) as f64
    }
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

/// Trains both denoisers on the min-max normalized dataset.
///
/// Records are sorted before use, so the result depends on the set of records and
/// the seed but not on file order. Initialization and batch draws use separate
/// streams of one seeded generator.
pub fn train_decoupled(
    dataset: &Dataset,
    config: &TrainConfig,
    seed: u64,
) -> Result<(DecoupledModel, TrainReport), DiffusionError> {
    if dataset.is_empty() {
        return Err(DataError::Empty.into());
    }
    let schedule = NoiseSchedule::from_params(&config.schedule)?;
    let t_max = schedule.t_max();
    let n_bus = dataset.n_bus();
    let mut rows = dataset.flat_rows();
    rows.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let stats = fit_norm(dataset)?;
    let width = 4 * n_bus;
    let mut data = Array2::zeros((rows.len(), width));
    for (r, row) in rows.iter().enumerate() {
        for (c, v) in stats.normalize(row).into_iter().enumerate() {
            data[[r, c]] = v;
        }
    }
    let (data_1, data_2) = split_batch(&data, n_bus);

    let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batch_rng = ChaCha8Rng::seed_from_u64(seed);
    batch_rng.set_stream(1);
    let hidden = config.hidden_widths(n_bus);
    let emb = TimeEmbedding::new(config.embed_width);
    let half = 2 * n_bus;
    let mut d1 = Mlp::new(half, &hidden, half, emb, &mut init_rng);
    let mut d2 = Mlp::new(half, &hidden, half, emb, &mut init_rng);
    let mut opt1 = Adam::new(&d1, config.adam);
    let mut opt2 = Adam::new(&d2, config.adam);

    let bs = config.batch_size.max(1);
    let mut trace = Vec::with_capacity(config.steps);
    let mut x1 = Array2::zeros((bs, half));
    let mut x2 = Array2::zeros((bs, half));
    let mut t = vec![0usize; bs];
    for step in 0..config.steps {
        for r in 0..bs {
            let idx = batch_rng.random_range(0..rows.len());
            t[r] = batch_rng.random_range(1..=t_max);
            x1.row_mut(r).assign(&data_1.row(idx));
            x2.row_mut(r).assign(&data_2.row(idx));
        }
        let eps_1 = gaussian(&mut batch_rng, bs, half);
        let eps_2 = gaussian(&mut batch_rng, bs, half);
        let scale_x: Vec<f64> = t.iter().map(|&tr| schedule.alpha_bar(tr).sqrt()).collect();
        let scale_e: Vec<f64> = t
            .iter()
            .map(|&tr| schedule.one_minus_alpha_bar(tr).sqrt())
            .collect();
        let noisy = |x: &Array2<f64>, e: &Array2<f64>| {
            let mut out = x.clone();
            for (r, mut row) in out.rows_mut().into_iter().enumerate() {
                row.zip_mut_with(&e.row(r), |xv, ev| *xv = scale_x[r] * *xv + scale_e[r] * ev);
            }
            out
        };
        let xt_1 = noisy(&x1, &eps_1);
        let xt_2 = noisy(&x2, &eps_2);
        let (l1, g1) = d1.loss_and_gradients(xt_1.view(), &t, t_max, eps_1.view())?;
        let (l2, g2) = d2.loss_and_gradients(xt_2.view(), &t, t_max, eps_2.view())?;
        let loss = l1 + l2;
        if !loss.is_finite() {
            return Err(DiffusionError::NonFinite {
                step: step + 1,
                what: "training loss",
            });
        }
        opt1.update(&mut d1, &g1);
        opt2.update(&mut d2, &g2);
        trace.push(loss);
        if (step + 1) % 5000 == 0 {
            log::info!("step {}: loss {:.5}", step + 1, loss);
        }
    }
    Ok((
        DecoupledModel {
            n_bus,
            schedule,
            stats,
            denoiser_1: d1,
            denoiser_2: d2,
        },
        TrainReport { loss_trace: trace },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acpf::PowerFlowRecord;

    fn tiny_dataset(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let records = (0..n)
            .map(|_| {
                let mut r = PowerFlowRecord::zeros(2);
                r.p[1] = -rng.random_range(0.8..1.0);
                r.p[0] = -r.p[1] * 1.01;
                r.q[1] = -rng.random_range(0.24..0.3);
                r.q[0] = -r.q[1] * 1.1;
                r.v = vec![1.0, rng.random_range(0.95..0.99)];
                r.theta[1] = -rng.random_range(0.05..0.1);
                r
            })
            .collect();
        Dataset::new("two", records)
    }

    fn small_config(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 32,
            hidden: Some(vec![32, 32]),
            embed_width: 8,
            schedule: ScheduleParams {
                t_max: 100,
                beta_1: 1e-4,
                beta_t: 2e-2,
            },
            ..Default::default()
        }
    }

    #[test]
    fn loss_goes_down_on_tiny_dataset() {
        let d = tiny_dataset(10, 0);
        let (_, rep) = train_decoupled(&d, &small_config(2000), 1).unwrap();
        let start = rep.window_mean(0, 50);
        let end = rep.window_mean(1950, 50);
        assert!(end < start, "start {start}, end {end}");
    }

    #[test]
    fn same_seed_same_model() {
        let d = tiny_dataset(10, 0);
        let (a, ra) = train_decoupled(&d, &small_config(50), 4).unwrap();
        let (b, rb) = train_decoupled(&d, &small_config(50), 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
    }

    #[test]
    fn row_order_does_not_matter() {
        let d = tiny_dataset(10, 0);
        let mut shuffled = d.clone();
        shuffled.records.reverse();
        shuffled.records.swap(2, 7);
        let (a, ra) = train_decoupled(&d, &small_config(30), 4).unwrap();
        let (b, rb) = train_decoupled(&shuffled, &small_config(30), 4).unwrap();
        assert_eq!(ra.loss_trace, rb.loss_trace);
        assert_eq!(a, b);
    }

    #[test]
    fn default_widths_scale_with_bus_count() {
        let c = TrainConfig::default();
        assert_eq!(c.hidden_widths(5), vec![128, 128]);
        assert_eq!(c.hidden_widths(118), vec![472, 472]);
    }
}
