use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mismatch::Welford;
use super::EvalError;
use crate::acpf::{equality_residual, PowerFlowRecord};
use crate::datagen::{fit_norm_rows, Dataset, NormStats};
use crate::grid::{BusKind, GridCase};
use crate::neural::{Adam, AdamConfig, Mlp, TimeEmbedding};

/// Flat-record indices of the variables a power-flow solve takes as given
/// (PQ: p, q; PV: p, v; slack: v, theta) and of the ones it solves for.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VariableSplit {
    pub known: Vec<usize>,
    pub unknown: Vec<usize>,
}

pub fn variable_split(case: &GridCase) -> VariableSplit {
    let b = case.n_bus();
    let (p, q, v, th) = (0, b, 2 * b, 3 * b);
    let mut known = Vec::with_capacity(2 * b);
    let mut unknown = Vec::with_capacity(2 * b);
    for (k, bus) in case.buses.iter().enumerate() {
        let (kn, un) = match bus.kind {
            BusKind::Pq => ([p + k, q + k], [v + k, th + k]),
            BusKind::Pv => ([p + k, v + k], [q + k, th + k]),
            BusKind::Slack => ([v + k, th + k], [p + k, q + k]),
        };
        known.extend(kn);
        unknown.extend(un);
    }
    known.sort_unstable();
    unknown.sort_unstable();
    VariableSplit { known, unknown }
}

/// Maps the known variables of a record to the unknown ones, in
/// [`VariableSplit`] order.
pub trait Predictor {
    fn predict(&self, known: &[f64]) -> Vec<f64>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// `None` means two layers of `max(128, 4B)`.
    pub hidden: Option<Vec<usize>>,
    pub adam: AdamConfig,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            steps: 5000,
            batch_size: 128,
            hidden: None,
            adam: AdamConfig::default(),
        }
    }
}

/// Feedforward regressor working on min-max normalized inputs and outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpPredictor {
    pub net: Mlp,
    pub in_stats: NormStats,
    pub out_stats: NormStats,
}

impl Predictor for MlpPredictor {
    fn predict(&self, known: &[f64]) -> Vec<f64> {
        let z = self.in_stats.normalize(known);
        let y = self.net.forward(&z, 0, 1).expect("predictor input width");
        self.out_stats.denormalize(&y)
    }
}

fn pick(row: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| row[i]).collect()
}

fn check_case(d: &Dataset, case: &GridCase) -> Result<(), EvalError> {
    if d.is_empty() {
        return Err(EvalError::Empty);
    }
    if d.n_bus() != case.n_bus() {
        return Err(EvalError::Width {
            expected: 4 * case.n_bus(),
            got: d.width(),
        });
    }
    Ok(())
}

/// Untrained predictor with the same architecture and normalization as
/// [`train_predictor`] would produce.
pub fn init_predictor(
    train: &Dataset,
    case: &GridCase,
    config: &PredictorConfig,
    rng: &mut ChaCha8Rng,
) -> Result<MlpPredictor, EvalError> {
    check_case(train, case)?;
    let split = variable_split(case);
    let rows = train.flat_rows();
    let xs: Vec<Vec<f64>> = rows.iter().map(|r| pick(r, &split.known)).collect();
    let ys: Vec<Vec<f64>> = rows.iter().map(|r| pick(r, &split.unknown)).collect();
    let in_stats = fit_norm_rows(&xs)?;
    let out_stats = fit_norm_rows(&ys)?;
    let hidden = config
        .hidden
        .clone()
        .unwrap_or_else(|| vec![(4 * case.n_bus()).max(128); 2]);
    let net = Mlp::new(
        split.known.len(),
        &hidden,
        split.unknown.len(),
        TimeEmbedding::none(),
        rng,
    );
    Ok(MlpPredictor {
        net,
        in_stats,
        out_stats,
    })
}

/// Fits the predictor by Adam on minibatches drawn with replacement.
pub fn train_predictor(
    train: &Dataset,
    case: &GridCase,
    config: &PredictorConfig,
    seed: u64,
) -> Result<MlpPredictor, EvalError> {
    let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batch_rng = ChaCha8Rng::seed_from_u64(seed);
    batch_rng.set_stream(1);
    let mut pred = init_predictor(train, case, config, &mut init_rng)?;
    let split = variable_split(case);
    let mut rows = train.flat_rows();
    rows.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let n_in = split.known.len();
    let n_out = split.unknown.len();
    let xs = Array2::from_shape_fn((rows.len(), n_in), |(r, c)| rows[r][split.known[c]]);
    let ys = Array2::from_shape_fn((rows.len(), n_out), |(r, c)| rows[r][split.unknown[c]]);
    let mut zx = Array2::zeros(xs.raw_dim());
    let mut zy = Array2::zeros(ys.raw_dim());
    for r in 0..rows.len() {
        let a = pred.in_stats.normalize(&xs.row(r).to_vec());
        let b = pred.out_stats.normalize(&ys.row(r).to_vec());
        zx.row_mut(r).assign(&ndarray::Array1::from(a));
        zy.row_mut(r).assign(&ndarray::Array1::from(b));
    }
    let bs = config.batch_size.max(1);
    let t = vec![0usize; bs];
    let mut opt = Adam::new(&pred.net, config.adam);
    let mut bx = Array2::zeros((bs, n_in));
    let mut by = Array2::zeros((bs, n_out));
    for step in 0..config.steps {
        for r in 0..bs {
            let i = batch_rng.random_range(0..rows.len());
            bx.row_mut(r).assign(&zx.row(i));
            by.row_mut(r).assign(&zy.row(i));
        }
        let (loss, g) = pred.net.loss_and_gradients(bx.view(), &t, 1, by.view())?;
        if !loss.is_finite() {
            return Err(EvalError::Training { step: step + 1 });
        }
        opt.update(&mut pred.net, &g);
    }
    Ok(pred)
}

/// Mean and spread of the total absolute mismatch over a test set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DownstreamResult {
    pub mean_dp: f64,
    pub std_dp: f64,
    pub mean_dq: f64,
    pub std_dq: f64,
    pub n_test: usize,
}

/// Completes every test record with the predictor's unknowns and measures
/// `sum_b |dp_b|` and `sum_b |dq_b|`.
pub fn evaluate_predictor(
    predictor: &dyn Predictor,
    test: &Dataset,
    case: &GridCase,
) -> Result<DownstreamResult, EvalError> {
    check_case(test, case)?;
    let split = variable_split(case);
    let mut wp = Welford::default();
    let mut wq = Welford::default();
    for rec in &test.records {
        let row = rec.to_flat();
        let y = predictor.predict(&pick(&row, &split.known));
        if y.len() != split.unknown.len() {
            return Err(EvalError::Width {
                expected: split.unknown.len(),
                got: y.len(),
            });
        }
        let mut full = row.clone();
        for (k, &i) in split.unknown.iter().enumerate() {
            full[i] = y[k];
        }
        let r = equality_residual(&PowerFlowRecord::from_flat(&full), case);
        wp.push(r.dp.iter().map(|d| d.abs()).sum());
        wq.push(r.dq.iter().map(|d| d.abs()).sum());
    }
    Ok(DownstreamResult {
        mean_dp: wp.mean(),
        std_dp: wp.std(),
        mean_dq: wq.mean(),
        std_dq: wq.std(),
        n_test: test.len(),
    })
}

/// Trains a predictor on `train` and evaluates it on `test`.
pub fn downstream_warmstart(
    train: &Dataset,
    test: &Dataset,
    case: &GridCase,
    seed: u64,
    config: &PredictorConfig,
) -> Result<DownstreamResult, EvalError> {
    check_case(test, case)?;
    let pred = train_predictor(train, case, config, seed)?;
    evaluate_predictor(&pred, test, case)
}
