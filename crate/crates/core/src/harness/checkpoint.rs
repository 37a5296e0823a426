use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{HarnessError, LocTrace, TrainConfig};
use crate::autograd::ParamGroup;
use crate::encoding::{TextEncoder, Tokenizer};
use crate::model::KMineModel;
use crate::optim::AdamWState;

pub const CHECKPOINT_FORMAT: &str = "kmine-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedParam {
    pub name: String,
    pub group: ParamGroup,
    pub value: Array2<f64>,
}

/// Everything needed to evaluate a model or resume its training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    /// Optimizer steps completed.
    pub step: usize,
    pub config: TrainConfig,
    /// Vocabulary in the `#kmine-vocab` file format.
    pub vocab: String,
    pub params: Vec<NamedParam>,
    pub optimizer: AdamWState,
    pub trace: LocTrace,
}

impl Checkpoint {
    pub(crate) fn capture(
        step: usize,
        config: &TrainConfig,
        tokenizer: &Tokenizer,
        model: &KMineModel,
        optimizer: &AdamWState,
        trace: &LocTrace,
    ) -> Self {
        let params = model
            .params
            .ids()
            .map(|id| NamedParam {
                name: model.params.name(id).to_string(),
                group: model.params.group(id),
                value: model.params.get(id).clone(),
            })
            .collect();
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            step,
            config: config.clone(),
            vocab: tokenizer.to_vocab_file(),
            params,
            optimizer: optimizer.clone(),
            trace: trace.clone(),
        }
    }

    pub fn tokenizer(&self) -> Result<Tokenizer, HarnessError> {
        Ok(Tokenizer::parse_vocab_file(&self.vocab)?)
    }

    /// Rebuilds the model; every stored tensor must match a parameter by name and shape.
    pub fn model(&self) -> Result<KMineModel, HarnessError> {
        let tok = self.tokenizer()?;
        if tok.vocab_size() != self.config.model.vocab_size {
            return Err(HarnessError::VocabMismatch {
                vocab: tok.vocab_size(),
                model: self.config.model.vocab_size,
            });
        }
        let mut model = KMineModel::new(&self.config.model, self.config.seed)?;
        if self.params.len() != model.params.len() {
            return Err(HarnessError::BadCheckpoint(format!(
                "{} tensors stored, model has {}",
                self.params.len(),
                model.params.len()
            )));
        }
        for p in &self.params {
            let id = model
                .params
                .id(&p.name)
                .ok_or_else(|| HarnessError::BadCheckpoint(format!("unknown parameter {}", p.name)))?;
            let slot = model.params.get_mut(id);
            if slot.dim() != p.value.dim() {
                return Err(HarnessError::BadCheckpoint(format!(
                    "{} has shape {:?}, expected {:?}",
                    p.name,
                    p.value.dim(),
                    slot.dim()
                )));
            }
            slot.assign(&p.value);
        }
        Ok(model)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let ck: Self = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(HarnessError::BadCheckpoint(format!("unsupported format {:?}", ck.format)));
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), HarnessError> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
