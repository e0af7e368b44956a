use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{TrainConfig, TrainError, TrainState};
use crate::model::{ModelCheckpoint, SlapModel};
use crate::tensor::{AdamState, Tensor, TensorRecord};

/// Model checkpoint plus optimizer state and step counters.
///
/// The model fields are flattened, so the file also loads as a plain
/// [`ModelCheckpoint`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainCheckpoint {
    #[serde(flatten)]
    pub model: ModelCheckpoint,
    pub step: u64,
    pub faults: u64,
    pub train_config: TrainConfig,
    pub adam_step: u64,
    pub adam_m: BTreeMap<String, TensorRecord>,
    pub adam_v: BTreeMap<String, TensorRecord>,
}

fn io(path: &Path, e: impl ToString) -> TrainError {
    TrainError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

impl TrainCheckpoint {
    pub fn from_state(state: &TrainState, cfg: &TrainConfig) -> Self {
        let moments = |bufs: &[Vec<f64>]| {
            state
                .model
                .params()
                .iter()
                .zip(bufs)
                .map(|((_, name, _), b)| (name.to_string(), TensorRecord::from(&Tensor::vector(b.clone()))))
                .collect()
        };
        Self {
            model: state.model.to_checkpoint(),
            step: state.step,
            faults: state.faults,
            train_config: cfg.clone(),
            adam_step: state.adam.step,
            adam_m: moments(&state.adam.m),
            adam_v: moments(&state.adam.v),
        }
    }

    pub fn to_state(&self) -> Result<TrainState, TrainError> {
        let model = SlapModel::from_checkpoint(&self.model)?;
        let moments = |map: &BTreeMap<String, TensorRecord>| -> Result<Vec<Vec<f64>>, TrainError> {
            model
                .params()
                .iter()
                .map(|(_, name, t)| {
                    let rec = map
                        .get(name)
                        .ok_or_else(|| TrainError::Config(format!("optimizer state missing {name}")))?;
                    let v = Tensor::try_from(rec).map_err(TrainError::Config)?;
                    if v.numel() != t.numel() {
                        return Err(TrainError::Config(format!("optimizer state for {name} has wrong size")));
                    }
                    Ok(v.into_data())
                })
                .collect()
        };
        let adam = AdamState {
            step: self.adam_step,
            m: moments(&self.adam_m)?,
            v: moments(&self.adam_v)?,
        };
        Ok(TrainState {
            step: self.step,
            model,
            adam,
            faults: self.faults,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let json = serde_json::to_string(self).map_err(|e| io(path, e))?;
        std::fs::write(path, json).map_err(|e| io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path).map_err(|e| io(path, e))?;
        serde_json::from_str(&text).map_err(|e| io(path, e))
    }
}
