//! Training objectives: response NLL, knowledge-selection loss, and their mixture
//! `total = (1 − λ)·L_RG + λ·L_KS`.

use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Graph, Var};
use crate::fusion::KnowledgeDistribution;
use crate::model::DecoderOutput;

/// Probability clamp applied before taking logs in the selection loss.
pub const KS_EPS: f64 = 1e-7;

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error("every target position is padding")]
    NoTargetTokens,
    #[error("selection loss needs a gold index")]
    GoldMissing,
    #[error("gold index {gold} outside a pool of {m}")]
    GoldOutOfRange { gold: usize, m: usize },
    #[error("lambda {0} outside [0, 1]")]
    BadLambda(f64),
    #[error("lambda > 0 but no sample in the batch has a gold index")]
    LambdaPositiveButNoGold,
    #[error("logits have {rows} rows for {targets} targets")]
    ShapeMismatch { rows: usize, targets: usize },
}

/// How the selection loss compares `α` with the gold one-hot.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionLoss {
    /// Mean per-option binary cross-entropy.
    #[default]
    Bce,
    /// `−ln α_gold`.
    Categorical,
}

impl FromStr for SelectionLoss {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bce" => Ok(SelectionLoss::Bce),
            "categorical" | "ce" => Ok(SelectionLoss::Categorical),
            other => Err(format!("unknown selection loss {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_rg: f64,
    pub l_ks: Option<f64>,
    pub total: f64,
    pub lambda: f64,
}

/// Targets predicted from teacher forcing: `target_ids[1..]`, PAD ignored.
pub fn shifted_targets(target_ids: &[u32], pad_id: u32) -> Vec<Option<usize>> {
    target_ids
        .iter()
        .skip(1)
        .map(|&t| (t != pad_id).then_some(t as usize))
        .collect()
}

/// Mean NLL node over non-PAD targets and the number of counted tokens.
pub fn nll_var(
    g: &mut Graph<'_>,
    logits: Var,
    target_ids: &[u32],
    pad_id: u32,
) -> Result<(Var, usize), ObjectiveError> {
    let targets = shifted_targets(target_ids, pad_id);
    let rows = g.value(logits).nrows();
    if rows != targets.len() {
        return Err(ObjectiveError::ShapeMismatch {
            rows,
            targets: targets.len(),
        });
    }
    let (loss, count) = g.cross_entropy(logits, &targets);
    if count == 0 {
        return Err(ObjectiveError::NoTargetTokens);
    }
    Ok((loss, count))
}

/// Mean per-token NLL of `target_ids[1..]` and the token count.
pub fn nll_response(
    logits: &DecoderOutput,
    target_ids: &[u32],
    pad_id: u32,
) -> Result<(f64, usize), ObjectiveError> {
    let mut g = Graph::detached();
    let l = g.constant(logits.logits.clone());
    let (loss, count) = nll_var(&mut g, l, target_ids, pad_id)?;
    Ok((g.scalar(loss), count))
}

pub fn selection_var(
    g: &mut Graph<'_>,
    alpha: Var,
    gold: usize,
    kind: SelectionLoss,
) -> Result<Var, ObjectiveError> {
    let m = g.value(alpha).len();
    if gold >= m {
        return Err(ObjectiveError::GoldOutOfRange { gold, m });
    }
    Ok(match kind {
        SelectionLoss::Bce => g.bce_onehot(alpha, gold, KS_EPS),
        SelectionLoss::Categorical => g.categorical_ce(alpha, gold, KS_EPS),
    })
}

/// Mean over options of `−[y log α + (1−y) log(1−α)]`, `y` the gold one-hot.
pub fn bce_selection(alpha: &KnowledgeDistribution, gold_index: Option<usize>) -> Result<f64, ObjectiveError> {
    let gold = gold_index.ok_or(ObjectiveError::GoldMissing)?;
    let mut g = Graph::detached();
    let a = g.constant(
        Array2::from_shape_vec((alpha.len(), 1), alpha.as_slice().to_vec()).expect("column"),
    );
    let l = selection_var(&mut g, a, gold, SelectionLoss::Bce)?;
    Ok(g.scalar(l))
}

fn check_lambda(lambda: f64) -> Result<(), ObjectiveError> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(ObjectiveError::BadLambda(lambda))
    }
}

/// Per-sample mixture. Without a selection loss the sample contributes `l_rg` alone.
pub fn combined_loss(l_rg: f64, l_ks: Option<f64>, lambda: f64) -> Result<LossBundle, ObjectiveError> {
    check_lambda(lambda)?;
    let total = match l_ks {
        Some(ks) if lambda > 0.0 => (1.0 - lambda) * l_rg + lambda * ks,
        _ => l_rg,
    };
    Ok(LossBundle {
        l_rg,
        l_ks,
        total,
        lambda,
    })
}

/// The same mixture on the tape.
pub fn combined_var(
    g: &mut Graph<'_>,
    l_rg: Var,
    l_ks: Option<Var>,
    lambda: f64,
) -> Result<Var, ObjectiveError> {
    check_lambda(lambda)?;
    Ok(match l_ks {
        Some(ks) if lambda > 0.0 => g.lincomb(&[(l_rg, 1.0 - lambda), (ks, lambda)]),
        _ => l_rg,
    })
}

/// Checks the batch-level precondition of a supervised mixture.
pub fn check_batch_supervision(lambda: f64, any_gold: bool) -> Result<(), ObjectiveError> {
    check_lambda(lambda)?;
    if lambda > 0.0 && !any_gold {
        return Err(ObjectiveError::LambdaPositiveButNoGold);
    }
    Ok(())
}
