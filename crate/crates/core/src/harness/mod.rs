//! Training loop, evaluation driver, configuration, checkpoints and Loc traces.

mod checkpoint;
mod eval;
mod trace;
mod train;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusError, Setting};
use crate::encoding::EncodingError;
use crate::fusion::FusionMode;
use crate::metrics::MetricError;
use crate::model::{DecodeStrategy, ModelConfig, ModelError};
use crate::objectives::{ObjectiveError, SelectionLoss};

pub use checkpoint::Checkpoint;
pub use eval::{evaluate, evaluate_model, EvalOptions};
pub use trace::{merged_csv, plot_loc, LocTrace, PlotOutput};
pub use train::{batch_indices, dropout_seed, train, StepRecord, Trainer};

pub use crate::metrics::EvalReport;

/// Environment variable that forces single-threaded execution.
pub const DETERMINISTIC_ENV: &str = "KMINE_DETERMINISTIC";

/// True when `KMINE_DETERMINISTIC` is set to anything but `0` or empty.
pub fn deterministic_mode() -> bool {
    std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| !v.is_empty() && v != "0")
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("the training set is empty")]
    EmptyDataset,
    #[error("lambda > 0 but no training turn has a gold index")]
    LambdaPositiveButNoGold,
    #[error("non-finite loss at step {step}: {dump}")]
    NonFiniteLoss { step: usize, dump: String },
    #[error("checkpoint vocabulary has {vocab} entries, model expects {model}")]
    VocabMismatch { vocab: usize, model: usize },
    #[error("no turns to evaluate under setting {0:?}")]
    EmptyEvaluation(Setting),
    #[error("no trace to plot")]
    EmptyTrace,
    #[error("malformed trace: {0}")]
    BadTrace(String),
    #[error("checkpoint does not fit the model: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    LinearDecay,
}

/// Training configuration. Stored as a flat TOML table; model fields sit
/// alongside the optimization ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_pretrained: f64,
    pub lr_raw: f64,
    pub schedule: Schedule,
    pub effective_batch: usize,
    pub micro_batch: usize,
    pub max_steps: usize,
    pub lambda: f64,
    pub mode: FusionMode,
    pub seed: u64,
    pub temperature: f64,
    pub selection_loss: SelectionLoss,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Save a checkpoint every this many steps; 0 saves only at the end.
    pub checkpoint_every: usize,
    pub train_data: Option<PathBuf>,
    pub valid_data: Option<PathBuf>,
    /// Vocabulary file; built from the training data when absent.
    pub vocab: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub setting: Setting,
    pub k_len: usize,
    pub history_window: usize,
    pub max_len: usize,
    pub max_resp_len: usize,
    pub decoding: DecodeStrategy,
    #[serde(flatten)]
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_pretrained: 2e-5,
            lr_raw: 5e-4,
            schedule: Schedule::LinearDecay,
            effective_batch: 64,
            micro_batch: 64,
            max_steps: 2000,
            lambda: 0.0,
            mode: FusionMode::Fused,
            seed: 0,
            temperature: 1.0,
            selection_loss: SelectionLoss::Bce,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            checkpoint_every: 0,
            train_data: None,
            valid_data: None,
            vocab: None,
            out_dir: PathBuf::from("runs/default"),
            setting: Setting::All,
            k_len: 32,
            history_window: 3,
            max_len: 128,
            max_resp_len: 32,
            decoding: DecodeStrategy::Greedy,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn accumulation_steps(&self) -> usize {
        self.effective_batch / self.micro_batch.max(1)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::InvalidConfig(m));
        if self.micro_batch == 0 || self.effective_batch == 0 {
            return bad("batch sizes must be positive".into());
        }
        if self.effective_batch % self.micro_batch != 0 {
            return bad(format!(
                "effective_batch {} is not a multiple of micro_batch {}",
                self.effective_batch, self.micro_batch
            ));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda {} outside [0, 1]", self.lambda));
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature {} must be positive", self.temperature));
        }
        if !(self.lr_pretrained >= 0.0 && self.lr_raw >= 0.0) {
            return bad("learning rates must be non-negative".into());
        }
        if self.k_len == 0 || self.history_window == 0 || self.max_resp_len < 2 {
            return bad("k_len and history_window must be >= 1, max_resp_len >= 2".into());
        }
        if self.max_len < self.k_len + 3 || self.max_len > self.model.max_positions || self.max_resp_len > self.model.max_positions {
            return bad(format!(
                "max_len {} / max_resp_len {} must fit max_positions {} (and max_len >= k_len + 3)",
                self.max_len, self.max_resp_len, self.model.max_positions
            ));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        Ok(toml::from_str(text)?)
    }

    /// Reads a config file; relative data paths resolve against its directory.
    pub fn read(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let mut cfg = Self::from_toml(&std::fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.train_data, &mut cfg.valid_data, &mut cfg.vocab].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Desk-scale preset for the synthetic task: short rows, a small backbone and
/// learning rates suited to training from random initialization. The scorer
/// gets a larger rate than the backbone. Batch 32 is the tested size.
pub fn synthetic_config(mode: FusionMode, lambda: f64, seed: u64, max_steps: usize, batch: usize) -> TrainConfig {
    TrainConfig {
        lr_pretrained: 5e-3,
        lr_raw: 3e-2,
        effective_batch: batch,
        micro_batch: batch,
        max_steps,
        lambda,
        mode,
        seed,
        k_len: 4,
        history_window: 2,
        max_len: 20,
        max_resp_len: 12,
        model: ModelConfig {
            d_model: 32,
            n_heads: 4,
            ffn_dim: 64,
            dropout: 0.0,
            max_positions: 32,
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    }
}
