//! Model and optimizer snapshots as JSON documents.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{read_json, write_json};
use crate::error::{Error, Result};
use crate::model::{UnifiedSsr, VocabSizes};
use crate::numeric::{AdamState, Real, Tensor};
use crate::train::Stage;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "F: Real")]
pub struct Checkpoint<F> {
    pub stage: Stage,
    /// Epochs completed in `stage`.
    pub epoch: usize,
    pub config: RunConfig,
    pub architecture_hash: String,
    pub vocab: VocabSizes,
    pub params: BTreeMap<String, Tensor<F>>,
    pub optimizer: Option<AdamState<F>>,
}

impl<F: Real> Checkpoint<F> {
    pub fn capture(model: &UnifiedSsr<F>, stage: Stage, epoch: usize, optimizer: Option<&AdamState<F>>) -> Self {
        Self {
            stage,
            epoch,
            config: model.config.clone(),
            architecture_hash: model.config.architecture_hash(),
            vocab: model.vocab,
            params: model.params.snapshot(),
            optimizer: optimizer.cloned(),
        }
    }

    /// Rebuilds the model from the stored config and overwrites its
    /// parameters.
    pub fn restore(&self) -> Result<UnifiedSsr<F>> {
        self.restore_with(self.config.clone())
    }

    /// Rebuilds the model under `config`, which may change training
    /// settings but must describe the same architecture.
    pub fn restore_with(&self, config: RunConfig) -> Result<UnifiedSsr<F>> {
        if config.architecture_hash() != self.architecture_hash {
            return Err(Error::config(format!(
                "checkpoint architecture {} does not match config architecture {}",
                self.architecture_hash,
                config.architecture_hash()
            )));
        }
        let mut model = UnifiedSsr::new(config, self.vocab)?;
        model.params.load_snapshot(&self.params)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}
