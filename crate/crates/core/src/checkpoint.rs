//! Versioned JSON checkpoints holding a full model and training state.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::emnn::EmnnModel;
use crate::error::{Error, Result};
use crate::trainer::TrainPhase;
use crate::wavemath::OptimizerState;

pub const CHECKPOINT_FORMAT: &str = "simlink-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub phase: TrainPhase,
    /// Epochs completed in `phase`.
    pub epochs_done: usize,
    /// Seed the random streams of `phase` were derived from; the streams
    /// are keyed by epoch, so this plus `epochs_done` fixes every later draw.
    pub train_seed: u64,
    pub model: EmnnModel,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn new(
        config_hash: &str,
        phase: TrainPhase,
        epochs_done: usize,
        train_seed: u64,
        model: EmnnModel,
        optimizer: Option<OptimizerState>,
    ) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config_hash: config_hash.into(),
            phase,
            epochs_done,
            train_seed,
            model,
            optimizer,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::config(format!("serialising checkpoint: {e}")))
    }

    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(text).map_err(|e| Error::parse(origin, e.to_string()))?;
        if c.format != CHECKPOINT_FORMAT || c.version != CHECKPOINT_VERSION {
            return Err(Error::parse(
                origin,
                format!("expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION}, found {} v{}", c.format, c.version),
            ));
        }
        c.model.spec.validate()?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }
}
