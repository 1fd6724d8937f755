use std::path::PathBuf;
use std::str::FromStr;

use gridflow_core::diffusion::{GuidanceMode, TrainConfig};
use gridflow_core::evaluate::{PredictorConfig, DEFAULT_BINS};
use gridflow_core::grid::GridCase;
use serde::{Deserialize, Serialize};

/// Everything a run depends on. Paths for inputs are taken as given; output
/// names are joined onto `out_dir`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub case: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
    /// Primary output file of `gen-data`, `train` and `sample`.
    pub out: Option<PathBuf>,
    /// Records to generate or sample.
    pub n: usize,
    /// Training dataset for `train`.
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub real: Option<PathBuf>,
    pub syn: Option<PathBuf>,
    pub bins: usize,
    /// Test set for `downstream`.
    pub test: Option<PathBuf>,
    pub train_sets: Vec<NamedPath>,
    pub train: TrainConfig,
    pub guidance: GuidanceSettings,
    pub predictor: PredictorConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            case: None,
            seed: None,
            out_dir: PathBuf::from("."),
            out: None,
            n: 1000,
            data: None,
            checkpoint: None,
            real: None,
            syn: None,
            bins: DEFAULT_BINS,
            test: None,
            train_sets: Vec::new(),
            train: TrainConfig::default(),
            guidance: GuidanceSettings::default(),
            predictor: PredictorConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceSettings {
    /// `None` picks the default for the case.
    pub lambda: Option<f64>,
    pub mode: GuidanceMode,
    pub include_inequalities: bool,
}

impl Default for GuidanceSettings {
    fn default() -> Self {
        GuidanceSettings {
            lambda: None,
            mode: GuidanceMode::ExactVjp,
            include_inequalities: true,
        }
    }
}

/// `NAME=PATH` pair naming a training source for `downstream`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedPath {
    pub name: String,
    pub path: PathBuf,
}

impl FromStr for NamedPath {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.split_once('=') {
            Some((name, path)) if !name.is_empty() && !path.is_empty() => Ok(NamedPath {
                name: name.to_string(),
                path: PathBuf::from(path),
            }),
            _ => Err(format!("expected NAME=PATH, got {s:?}")),
        }
    }
}

/// Guidance scale used when none is configured.
pub fn default_lambda(case: &GridCase) -> f64 {
    match case.name.as_str() {
        "case5" => 1e-2,
        "case24" => 1e-4,
        "case118" => 5e-4,
        _ => 0.0,
    }
}
