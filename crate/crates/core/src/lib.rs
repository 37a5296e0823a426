//! Knowledge-grounded response generation with unsupervised knowledge selection.
//!
//! An encoder reads `m` sequences per dialogue turn, one per candidate knowledge
//! passage, each followed by the same dialogue history. A fusion module scores
//! every encoded pair from its `[CLS]` state and the mean state of the last user
//! utterance, turns the scores into a distribution, and hands the decoder the
//! weighted sum of the `m` encodings. Because the decoder loss reaches the scorer
//! through that weighted sum, the selection can be learned from the language
//! modelling loss alone.
//!
//! Module map:
//!
//! * [`corpus`]: dialogue turns, JSONL ingestion, data settings, synthetic task.
//! * [`encoding`]: tokenizer and assembly of the aligned knowledge/history rows.
//! * [`autograd`]: the reverse-mode tape everything trains on.
//! * [`model`]: the encoder-decoder backbone and decoding.
//! * [`fusion`]: feature pooling, scoring, normalization, aggregation.
//! * [`objectives`]: response NLL, selection BCE and their mixture.
//! * [`metrics`]: R@1, F1, KF1, ROUGE, perplexity, localization.
//! * [`harness`]: training, evaluation, checkpoints, Loc traces and plots.

pub mod autograd;
pub mod corpus;
pub mod encoding;
pub mod fusion;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod optim;

pub use corpus::{Dataset, DialogueTurn, Setting, Speaker, Split, SyntheticSpec, Utterance};
pub use encoding::{AssembledInput, Tokenizer};
pub use fusion::{FusionMode, KnowledgeDistribution};
pub use harness::{evaluate, train, Checkpoint, EvalReport, LocTrace, TrainConfig};
pub use model::{KMineModel, ModelConfig};
