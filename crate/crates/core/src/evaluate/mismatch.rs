use std::io::Write;
use std::path::Path;

use super::EvalError;
use crate::acpf::equality_residual;
use crate::datagen::Dataset;
use crate::grid::GridCase;

/// Streaming mean and population variance.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Welford {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn std(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            (self.m2 / self.n as f64).max(0.0).sqrt()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BusMismatch {
    pub mean_dp: f64,
    pub std_dp: f64,
    pub mean_dq: f64,
    pub std_dq: f64,
}

/// Per-bus moments of the power balance residual, in p.u.
#[derive(Debug, Clone, PartialEq)]
pub struct MismatchReport {
    pub case_name: String,
    pub base_mva: f64,
    pub n_records: usize,
    pub buses: Vec<BusMismatch>,
}

/// Per-bus residual samples: `dp[b][r]`, `dq[b][r]`.
pub struct MismatchSamples {
    pub dp: Vec<Vec<f64>>,
    pub dq: Vec<Vec<f64>>,
}

fn check_width(dataset: &Dataset, case: &GridCase) -> Result<(), EvalError> {
    if !dataset.is_empty() && dataset.n_bus() != case.n_bus() {
        return Err(EvalError::Width {
            expected: 4 * case.n_bus(),
            got: dataset.width(),
        });
    }
    Ok(())
}

pub fn mismatch_samples(dataset: &Dataset, case: &GridCase) -> Result<MismatchSamples, EvalError> {
    check_width(dataset, case)?;
    let b = case.n_bus();
    let mut out = MismatchSamples {
        dp: vec![Vec::with_capacity(dataset.len()); b],
        dq: vec![Vec::with_capacity(dataset.len()); b],
    };
    for rec in &dataset.records {
        let r = equality_residual(rec, case);
        for k in 0..b {
            out.dp[k].push(r.dp[k]);
            out.dq[k].push(r.dq[k]);
        }
    }
    Ok(out)
}

pub fn mismatch_report(dataset: &Dataset, case: &GridCase) -> Result<MismatchReport, EvalError> {
    check_width(dataset, case)?;
    let b = case.n_bus();
    let mut dp = vec![Welford::default(); b];
    let mut dq = vec![Welford::default(); b];
    for rec in &dataset.records {
        let r = equality_residual(rec, case);
        for k in 0..b {
            dp[k].push(r.dp[k]);
            dq[k].push(r.dq[k]);
        }
    }
    Ok(MismatchReport {
        case_name: case.name.clone(),
        base_mva: case.base_mva,
        n_records: dataset.len(),
        buses: dp
            .iter()
            .zip(&dq)
            .map(|(p, q)| BusMismatch {
                mean_dp: p.mean(),
                std_dp: p.std(),
                mean_dq: q.mean(),
                std_dq: q.std(),
            })
            .collect(),
    })
}

impl MismatchReport {
    /// One row per bus, p.u. columns followed by MW/MVar columns.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "bus",
            "mean_dp",
            "std_dp",
            "mean_dq",
            "std_dq",
            "mean_dp_mw",
            "std_dp_mw",
            "mean_dq_mvar",
            "std_dq_mvar",
        ])?;
        let s = self.base_mva;
        for (k, b) in self.buses.iter().enumerate() {
            let mut row = vec![(k + 1).to_string()];
            for v in [b.mean_dp, b.std_dp, b.mean_dq, b.std_dq] {
                row.push(format!("{v:.16e}"));
            }
            for v in [b.mean_dp, b.std_dp, b.mean_dq, b.std_dq] {
                row.push(format!("{:.16e}", v * s));
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    /// `bins + 1` increasing edges.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

pub const DEFAULT_BINS: usize = 50;

/// Equal-width bins over the data range. Bins are left-closed and right-open
/// except the last, which is closed. Constant data get a unit-width range centered
/// on the value; empty data get `[0, 1]`.
pub fn histogram(values: &[f64], bins: usize) -> Result<Histogram, EvalError> {
    if bins == 0 {
        return Err(EvalError::Bins);
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(EvalError::NonFinite);
    }
    let (mut lo, mut hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if values.is_empty() {
        lo = 0.0;
        hi = 1.0;
    } else if lo == hi {
        lo -= 0.5;
        hi += 0.5;
    }
    let mut edges: Vec<f64> = (0..=bins)
        .map(|k| lo + (hi - lo) * k as f64 / bins as f64)
        .collect();
    edges[bins] = hi;
    let mut counts = vec![0usize; bins];
    for &x in values {
        let mut k = (((x - lo) / (hi - lo)) * bins as f64).floor() as isize;
        k = k.clamp(0, bins as isize - 1);
        let mut k = k as usize;
        while k > 0 && x < edges[k] {
            k -= 1;
        }
        while k + 1 < bins && x >= edges[k + 1] {
            k += 1;
        }
        counts[k] += 1;
    }
    Ok(Histogram { edges, counts })
}

impl Histogram {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["bin_lo", "bin_hi", "count"])?;
        for (k, c) in self.counts.iter().enumerate() {
            w.write_record([
                format!("{:.16e}", self.edges[k]),
                format!("{:.16e}", self.edges[k + 1]),
                c.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn histogram_export(values: &[f64], bins: usize, path: &Path) -> Result<(), EvalError> {
    let h = histogram(values, bins)?;
    let mut buf = Vec::new();
    h.write_csv(&mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acpf::PowerFlowRecord;
    use crate::grid::parse_case;

    const TWO_BUS: &str = "\
case two base_mva 100
bus
bus 1 slack pmin -5 pmax 5 qmin -5 qmax 5 vmin 0.9 vmax 1.1 pload 0 qload 0 vset 1.0
bus 2 pq pmin -1 pmax -0.8 qmin -0.3 qmax -0.24 vmin 0.9 vmax 1.1 pload 1 qload 0.3 vset 1.0
branch
branch 1 2 r 0.01 x 0.1 smax 3
";

    #[test]
    fn welford_matches_two_pass() {
        let xs = [1.0, 4.0, -2.0, 7.5, 0.25];
        let mut w = Welford::default();
        xs.iter().for_each(|x| w.push(*x));
        let mean = xs.iter().sum::<f64>() / 5.0;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 5.0;
        assert!((w.mean() - mean).abs() < 1e-15);
        assert!((w.std() - var.sqrt()).abs() < 1e-14);
        assert_eq!(Welford::default().std(), 0.0);
    }

    #[test]
    fn single_record_with_known_mismatch() {
        let case = parse_case(TWO_BUS).unwrap();
        // flat state, no flows: residual equals the injection
        let mut r = PowerFlowRecord::zeros(2);
        r.v = vec![1.0, 1.0];
        r.p[0] = 0.2;
        let rep = mismatch_report(&Dataset::new("two", vec![r]), &case).unwrap();
        assert!((rep.buses[0].mean_dp - 0.2).abs() < 1e-15);
        assert_eq!(rep.buses[0].std_dp, 0.0);
        assert_eq!(rep.buses[1].mean_dp, 0.0);
        let mut buf = Vec::new();
        rep.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("bus,mean_dp,std_dp,mean_dq,std_dq,mean_dp_mw"));
        assert!(text.lines().nth(1).unwrap().contains("2.0000000000000000e1"));
    }

    #[test]
    fn width_must_match_case() {
        let case = parse_case(TWO_BUS).unwrap();
        let d = Dataset::new("x", vec![PowerFlowRecord::zeros(3)]);
        assert!(mismatch_report(&d, &case).is_err());
    }

    #[test]
    fn histogram_edge_cases() {
        let h = histogram(&[2.0; 7], 1).unwrap();
        assert_eq!(h.counts, vec![7]);
        let h = histogram(&[], 4).unwrap();
        assert_eq!(h.counts, vec![0; 4]);
        assert!(histogram(&[1.0], 0).is_err());
        assert!(histogram(&[f64::NAN], 3).is_err());
        // the maximum lands in the last bin, interior edges go right
        let h = histogram(&[0.0, 0.5, 1.0], 2).unwrap();
        assert_eq!(h.counts, vec![1, 2]);
        assert_eq!(h.edges, vec![0.0, 0.5, 1.0]);
    }
}
