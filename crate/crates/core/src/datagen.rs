//! Ground-truth dataset generation, dataset CSV I/O and min-max normalization.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acpf::{
    dispatch, equality_residual, inequality_residual, newton_solve, Loads, NewtonOptions,
    PowerFlowRecord,
};
use crate::grid::{GridCase, DEMAND_FLOOR};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("row {row}: {msg}")]
    Format { row: usize, msg: String },
    #[error("dataset is empty")]
    Empty,
    #[error("width mismatch: expected {expected} columns, got {got}")]
    Width { expected: usize, got: usize },
    #[error(
        "generation aborted after {attempts} attempts in window ending at record {record}: \
         {failures} failed solves (case is likely mis-specified)"
    )]
    Aborted {
        record: usize,
        attempts: usize,
        failures: usize,
    },
}

/// Records in bus-major blocks `(p, q, v, theta)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub case_name: String,
    pub seed: Option<u64>,
    pub records: Vec<PowerFlowRecord>,
}

/// CSV header for a `n_bus` system.
pub fn csv_header(n_bus: usize) -> Vec<String> {
    ["p", "q", "v", "theta"]
        .iter()
        .flat_map(|name| (1..=n_bus).map(move |b| format!("{name}_{b}")))
        .collect()
}

impl Dataset {
    pub fn new(case_name: impl Into<String>, records: Vec<PowerFlowRecord>) -> Self {
        Dataset {
            case_name: case_name.into(),
            seed: None,
            records,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Bus count, or 0 for an empty dataset.
    pub fn n_bus(&self) -> usize {
        self.records.first().map_or(0, |r| r.n_bus())
    }

    pub fn width(&self) -> usize {
        4 * self.n_bus()
    }

    pub fn flat_rows(&self) -> Vec<Vec<f64>> {
        self.records.iter().map(|r| r.to_flat()).collect()
    }

    /// Writes the header and one row per record with 17 significant digits.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), DataError> {
        write_rows(out, self.n_bus(), self.records.iter().map(|r| r.to_flat()))
    }

    /// Reads a dataset; the bus count comes from the header, which must match
    /// [`csv_header`] exactly.
    pub fn read_csv<R: Read>(input: R, case_name: &str) -> Result<Dataset, DataError> {
        let rows = read_rows(input)?;
        Ok(Dataset::new(
            case_name,
            rows.iter().map(|r| PowerFlowRecord::from_flat(r)).collect(),
        ))
    }
}

fn write_rows<W: Write>(
    out: W,
    n_bus: usize,
    rows: impl Iterator<Item = Vec<f64>>,
) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(csv_header(n_bus))?;
    for row in rows {
        w.write_record(row.iter().map(|x| format!("{x:.16e}")))?;
    }
    w.flush()?;
    Ok(())
}

fn read_rows<R: Read>(input: R) -> Result<Vec<Vec<f64>>, DataError> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if header.is_empty() || header.len() % 4 != 0 || header != csv_header(header.len() / 4) {
        return Err(DataError::Format {
            row: 0,
            msg: "header is not p_1..p_B,q_1..q_B,v_1..v_B,theta_1..theta_B".into(),
        });
    }
    let width = header.len();
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != width {
            return Err(DataError::Width {
                expected: width,
                got: rec.len(),
            });
        }
        let row = rec
            .iter()
            .map(|f| f.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| DataError::Format {
                row: i + 1,
                msg: e.to_string(),
            })?;
        rows.push(row);
    }
    Ok(rows)
}

/// Draws each bus demand component independently and uniformly between
/// `DEMAND_FLOOR * nominal` and nominal.
pub fn sample_loads<R: Rng + ?Sized>(case: &GridCase, rng: &mut R) -> Loads {
    let mut draw = |nom: f64| {
        let lo = (DEMAND_FLOOR * nom).min(nom);
        let hi = (DEMAND_FLOOR * nom).max(nom);
        lo + (hi - lo) * rng.random::<f64>()
    };
    let mut loads = Loads::zeros(case.n_bus());
    for (k, bus) in case.buses.iter().enumerate() {
        loads.p[k] = draw(bus.p_load_nom);
        loads.q[k] = draw(bus.q_load_nom);
    }
    loads
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenOptions {
    pub newton: NewtonOptions,
    /// Attempts per record before the run is declared hopeless.
    pub max_attempts: usize,
    /// Records per abort-check window.
    pub window: usize,
}

impl Default for GenOptions {
    fn default() -> Self {
        GenOptions {
            newton: NewtonOptions {
                enforce_q_limits: true,
                ..NewtonOptions::default()
            },
            max_attempts: 100,
            window: 64,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GenReport {
    pub attempts: usize,
    /// Solves that failed to converge.
    pub diverged: usize,
    /// Converged solves outside the case limits.
    pub rejected: usize,
    /// Accepted records where some PV bus was pinned at a reactive limit.
    pub q_limited: usize,
}

struct RecordOutcome {
    record: Option<PowerFlowRecord>,
    attempts: usize,
    diverged: usize,
    rejected: usize,
    q_limited: bool,
}

fn generate_one(case: &GridCase, seed: u64, index: usize, opts: &GenOptions) -> RecordOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let mut out = RecordOutcome {
        record: None,
        attempts: 0,
        diverged: 0,
        rejected: 0,
        q_limited: false,
    };
    while out.attempts < opts.max_attempts {
        out.attempts += 1;
        let loads = sample_loads(case, &mut rng);
        let d = dispatch(case, &loads);
        match newton_solve(case, &loads, &d, &opts.newton) {
            Ok(sol) => {
                let ok = sol.record.is_finite()
                    && inequality_residual(&sol.record, case).violation_count() == 0
                    && equality_residual(&sol.record, case).max_abs() <= opts.newton.tol;
                if ok {
                    out.q_limited = !sol.switched.is_empty();
                    out.record = Some(sol.record);
                    return out;
                }
                out.rejected += 1;
            }
            Err(_) => out.diverged += 1,
        }
    }
    out
}

/// Generates `n` feasible records by load sampling, proportional dispatch and a
/// Newton solve. Record `i` uses its own RNG stream, so the output does not depend
/// on the number of worker threads. Failed solves are resampled; if more than half
/// of the attempts within a window fail, generation stops with an error.
pub fn generate_dataset(
    case: &GridCase,
    n: usize,
    seed: u64,
    opts: &GenOptions,
) -> Result<(Dataset, GenReport), DataError> {
    let mut records = Vec::with_capacity(n);
    let mut report = GenReport::default();
    let window = opts.window.max(1);
    let mut start = 0;
    while start < n {
        let end = (start + window).min(n);
        let outcomes: Vec<RecordOutcome> = (start..end)
            .into_par_iter()
            .map(|i| generate_one(case, seed, i, opts))
            .collect();
        let attempts: usize = outcomes.iter().map(|o| o.attempts).sum();
        let failures: usize = outcomes.iter().map(|o| o.diverged + o.rejected).sum();
        report.attempts += attempts;
        report.diverged += outcomes.iter().map(|o| o.diverged).sum::<usize>();
        report.rejected += outcomes.iter().map(|o| o.rejected).sum::<usize>();
        report.q_limited += outcomes.iter().filter(|o| o.q_limited).count();
        if 2 * failures > attempts || outcomes.iter().any(|o| o.record.is_none()) {
            return Err(DataError::Aborted {
                record: end - 1,
                attempts,
                failures,
            });
        }
        records.extend(outcomes.into_iter().filter_map(|o| o.record));
        start = end;
    }
    if report.diverged + report.rejected > 0 {
        log::info!(
            "{}: {} diverged and {} out-of-limit solves resampled",
            case.name,
            report.diverged,
            report.rejected
        );
    }
    Ok((
        Dataset {
            case_name: case.name.clone(),
            seed: Some(seed),
            records,
        },
        report,
    ))
}

/// Per-coordinate range over a training set, in flattened record order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub x_min: Vec<f64>,
    pub x_max: Vec<f64>,
}

pub fn fit_norm(dataset: &Dataset) -> Result<NormStats, DataError> {
    fit_norm_rows(&dataset.flat_rows())
}

pub fn fit_norm_rows(rows: &[Vec<f64>]) -> Result<NormStats, DataError> {
    let first = rows.first().ok_or(DataError::Empty)?;
    let mut x_min = first.clone();
    let mut x_max = first.clone();
    for row in &rows[1..] {
        if row.len() != x_min.len() {
            return Err(DataError::Width {
                expected: x_min.len(),
                got: row.len(),
            });
        }
        for (k, &x) in row.iter().enumerate() {
            x_min[k] = x_min[k].min(x);
            x_max[k] = x_max[k].max(x);
        }
    }
    Ok(NormStats { x_min, x_max })
}

impl NormStats {
    pub fn width(&self) -> usize {
        self.x_min.len()
    }

    pub fn is_degenerate(&self, k: usize) -> bool {
        self.x_max[k] == self.x_min[k]
    }

    /// Maps to `[-1, 1]`; constant coordinates map to 0.
    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(k, &xk)| {
                if self.is_degenerate(k) {
                    0.0
                } else {
                    2.0 * (xk - self.x_min[k]) / (self.x_max[k] - self.x_min[k]) - 1.0
                }
            })
            .collect()
    }

    /// Inverse of [`NormStats::normalize`]; constant coordinates return `x_min`.
    pub fn denormalize(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .enumerate()
            .map(|(k, &zk)| {
                if self.is_degenerate(k) {
                    self.x_min[k]
                } else {
                    (zk + 1.0) * 0.5 * (self.x_max[k] - self.x_min[k]) + self.x_min[k]
                }
            })
            .collect()
    }

    /// Diagonal of the denormalization Jacobian.
    pub fn denorm_jacobian_diag(&self) -> Vec<f64> {
        (0..self.width())
            .map(|k| {
                if self.is_degenerate(k) {
                    0.0
                } else {
                    0.5 * (self.x_max[k] - self.x_min[k])
                }
            })
            .collect()
    }

    /// Two rows, min then max, under the dataset header.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), DataError> {
        write_rows(
            out,
            self.width() / 4,
            [self.x_min.clone(), self.x_max.clone()].into_iter(),
        )
    }

    pub fn read_csv<R: Read>(input: R) -> Result<NormStats, DataError> {
        let rows = read_rows(input)?;
        if rows.len() != 2 {
            return Err(DataError::Format {
                row: rows.len(),
                msg: "expected exactly two rows (min, max)".into(),
            });
        }
        let stats = NormStats {
            x_min: rows[0].clone(),
            x_max: rows[1].clone(),
        };
        if stats.x_min.iter().zip(&stats.x_max).any(|(a, b)| a > b) {
            return Err(DataError::Format {
                row: 2,
                msg: "min exceeds max".into(),
            });
        }
        Ok(stats)
    }
}
