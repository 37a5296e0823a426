use rayon::prelude::*;

use super::{deterministic_mode, Checkpoint, HarnessError, TrainConfig};
use crate::corpus::{Dataset, DialogueTurn, Setting};
use crate::encoding::{assemble, encode_response, Special, TextEncoder, Tokenizer};
use crate::metrics::{EvalReport, MetricAccumulator, TurnMeasurement};
use crate::model::{DecodeStrategy, KMineModel};
use crate::objectives::nll_response;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub decoding: DecodeStrategy,
    /// Skip generation (F1, KF1 and ROUGE are then computed on an empty prediction).
    pub generate: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            decoding: DecodeStrategy::Greedy,
            generate: true,
        }
    }
}

struct Measured {
    alpha: Vec<f64>,
    prediction: String,
    nll_sum: f64,
    tokens: usize,
}

fn measure(
    model: &KMineModel,
    tok: &Tokenizer,
    cfg: &TrainConfig,
    opts: &EvalOptions,
    turn: &DialogueTurn,
) -> Result<Measured, HarnessError> {
    let input = assemble(turn, tok, cfg.k_len, cfg.history_window, cfg.max_len)?;
    let (alpha, fused) = model.select(&input, cfg.mode, cfg.temperature)?;
    let target = encode_response(turn, tok, cfg.max_resp_len)?;
    let logits = model.decode_logprobs(&fused, &target)?;
    let (nll, tokens) = nll_response(&logits, &target, tok.special(Special::Pad))?;
    let prediction = if opts.generate {
        let ids = model.generate(&fused, cfg.max_resp_len - 1, opts.decoding)?;
        tok.decode_words(&ids)
    } else {
        String::new()
    };
    Ok(Measured {
        alpha,
        prediction,
        nll_sum: nll * tokens as f64,
        tokens,
    })
}

/// Evaluates a model on the turns of `dataset` selected by `setting`. Turns are
/// scored in parallel unless deterministic mode is on; aggregation always runs
/// in dataset order.
pub fn evaluate_model(
    model: &KMineModel,
    tok: &Tokenizer,
    cfg: &TrainConfig,
    dataset: &Dataset,
    setting: Setting,
    opts: &EvalOptions,
) -> Result<EvalReport, HarnessError> {
    if tok.vocab_size() != model.config().vocab_size {
        return Err(HarnessError::VocabMismatch {
            vocab: tok.vocab_size(),
            model: model.config().vocab_size,
        });
    }
    let data = dataset.clone().with_setting(setting);
    if data.is_empty() {
        return Err(HarnessError::EmptyEvaluation(setting));
    }
    let work = |t: &DialogueTurn| measure(model, tok, cfg, opts, t);
    let measured: Vec<Result<Measured, HarnessError>> = if deterministic_mode() {
        data.turns.iter().map(work).collect()
    } else {
        data.turns.par_iter().map(work).collect()
    };
    let mut acc = MetricAccumulator::default();
    for (turn, m) in data.turns.iter().zip(measured) {
        let m = m?;
        acc.add(&TurnMeasurement {
            alpha: &m.alpha,
            gold_index: turn.gold_index,
            gold_knowledge: turn.gold_knowledge(),
            prediction: &m.prediction,
            reference: &turn.response,
            nll_sum: m.nll_sum,
            tokens: m.tokens,
        });
    }
    let decoding = if opts.generate {
        opts.decoding.to_string()
    } else {
        "none".to_string()
    };
    Ok(acc.finish(setting, &decoding)?)
}

/// Evaluates a checkpoint with greedy decoding.
pub fn evaluate(checkpoint: &Checkpoint, dataset: &Dataset, setting: Setting) -> Result<EvalReport, HarnessError> {
    let opts = EvalOptions {
        decoding: checkpoint.config.decoding,
        ..EvalOptions::default()
    };
    evaluate_model(
        &checkpoint.model()?,
        &checkpoint.tokenizer()?,
        &checkpoint.config,
        dataset,
        setting,
        &opts,
    )
}
