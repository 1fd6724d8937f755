use serde::{Deserialize, Serialize};

use super::{DecoupledModel, DiffusionError, NoiseSchedule, ScheduleParams, TrainConfig};
use crate::datagen::NormStats;
use crate::grid::{parse_case, GridCase};
use crate::neural::Mlp;

pub const CHECKPOINT_FORMAT: &str = "gridflow-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to sample from a trained model, including the grid case it
/// was trained on. Serialized as JSON with round-trip-exact floats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub case_text: String,
    pub n_bus: usize,
    pub schedule: ScheduleParams,
    pub stats: NormStats,
    pub train_config: TrainConfig,
    pub train_seed: u64,
    pub denoiser_1: Mlp,
    pub denoiser_2: Mlp,
}

impl Checkpoint {
    pub fn new(model: &DecoupledModel, case: &GridCase, config: &TrainConfig, seed: u64) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            case_text: case.to_case_text(),
            n_bus: model.n_bus,
            schedule: model.schedule.params,
            stats: model.stats.clone(),
            train_config: config.clone(),
            train_seed: seed,
            denoiser_1: model.denoiser_1.clone(),
            denoiser_2: model.denoiser_2.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, DiffusionError> {
        let ck: Checkpoint =
            serde_json::from_str(text).map_err(|e| DiffusionError::Checkpoint(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(DiffusionError::Checkpoint(format!("unknown format {:?}", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(DiffusionError::Checkpoint(format!(
                "unsupported version {}",
                ck.version
            )));
        }
        let half = 2 * ck.n_bus;
        for d in [&ck.denoiser_1, &ck.denoiser_2] {
            if d.data_dim != half || d.output_dim() != half {
                return Err(DiffusionError::Checkpoint("denoiser width does not match bus count".into()));
            }
            if !d.is_finite() {
                return Err(DiffusionError::Checkpoint("non-finite parameters".into()));
            }
        }
        if ck.stats.width() != 4 * ck.n_bus {
            return Err(DiffusionError::Checkpoint("normalization width does not match bus count".into()));
        }
        Ok(ck)
    }

    pub fn case(&self) -> Result<GridCase, DiffusionError> {
        let case = parse_case(&self.case_text).map_err(|e| DiffusionError::Checkpoint(e.to_string()))?;
        if case.n_bus() != self.n_bus {
            return Err(DiffusionError::CaseMismatch {
                expected: self.n_bus,
                got: case.n_bus(),
            });
        }
        Ok(case)
    }

    pub fn model(&self) -> Result<DecoupledModel, DiffusionError> {
        Ok(DecoupledModel {
            n_bus: self.n_bus,
            schedule: NoiseSchedule::from_params(&self.schedule)?,
            stats: self.stats.clone(),
            denoiser_1: self.denoiser_1.clone(),
            denoiser_2: self.denoiser_2.clone(),
        })
    }
}
