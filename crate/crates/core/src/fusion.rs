//! Score-and-aggregate knowledge fusion.
//!
//! For each of the `m` encoded knowledge-history rows the module pools a feature
//! `[h_CLS ; mean(h_LU)]`, scores it with a linear map, normalizes the scores
//! with a softmax into `α`, and aggregates the rows into one state sequence:
//!
//! * `Fused`: `h_j = Σ_i α_i H_ij` (the score path is differentiable),
//! * `Mean`:  `h_j = (1/m) Σ_i H_ij` (α is ignored),
//! * `Max`:   `h = H_argmax(α)` (hard selection, no gradient reaches the scorer).
//!
//! The graph-level functions are what training runs; the array-level wrappers
//! evaluate the same code on constants.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Graph, ParamId, Var};
use crate::encoding::AssembledInput;

#[derive(Debug, Error, PartialEq)]
pub enum FusionError {
    #[error("last-utterance span has no unmasked position in row {0}")]
    EmptySpan(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("not a distribution: {0}")]
    InvalidDistribution(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    #[default]
    Fused,
    Mean,
    Max,
}

impl FromStr for FusionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "fused" => Ok(FusionMode::Fused),
            "mean" => Ok(FusionMode::Mean),
            "max" => Ok(FusionMode::Max),
            other => Err(format!("unknown fusion mode {other:?} (expected fused|mean|max)")),
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::Fused => "fused",
            FusionMode::Mean => "mean",
            FusionMode::Max => "max",
        })
    }
}

/// Unnormalized relevance scores, one per pool option.
#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceScores(pub Vec<f64>);

/// Normalized relevance weights over the pool.
#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeDistribution(Vec<f64>);

impl KnowledgeDistribution {
    pub fn new(alpha: Vec<f64>) -> Result<Self, FusionError> {
        if alpha.is_empty() {
            return Err(FusionError::InvalidDistribution("empty".into()));
        }
        if alpha.iter().any(|a| !a.is_finite() || *a < 0.0 || *a > 1.0) {
            return Err(FusionError::InvalidDistribution(format!("{alpha:?}")));
        }
        let total: f64 = alpha.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(FusionError::InvalidDistribution(format!("sums to {total}")));
        }
        Ok(Self(alpha))
    }

    pub fn uniform(m: usize) -> Self {
        Self(vec![1.0 / m as f64; m])
    }

    pub fn one_hot(m: usize, i: usize) -> Self {
        let mut a = vec![0.0; m];
        a[i] = 1.0;
        Self(a)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest weight; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

/// Lowest index among the maxima.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Encoder output for the `m` rows of one turn.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderStates {
    /// `m x T x d`.
    pub states: Array3<f64>,
    /// `m x T`, equal to the assembled attention mask.
    pub mask: Array2<u8>,
}

impl EncoderStates {
    /// Packs into the `(m·T) x d` layout used on the tape.
    pub fn packed(&self) -> Array2<f64> {
        let (m, t, d) = self.states.dim();
        self.states
            .to_shape((m * t, d))
            .expect("contiguous states")
            .to_owned()
    }

    pub fn from_packed(packed: &Array2<f64>, mask: Array2<u8>) -> Self {
        let (m, t) = mask.dim();
        let d = packed.ncols();
        let states = packed
            .to_shape((m, t, d))
            .expect("packed rows match the mask")
            .to_owned();
        Self { states, mask }
    }
}

/// The single state sequence handed to the decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedState {
    /// `T x d`.
    pub states: Array2<f64>,
    pub mask: Vec<bool>,
}

/// Scorer parameters: a `2d x 1` weight column and a `1 x 1` bias.
#[derive(Clone, Copy, Debug)]
pub struct Scorer {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Everything the fusion step leaves on the tape.
#[derive(Clone, Debug)]
pub struct FusionOutput {
    pub features: Var,
    pub scores: Var,
    /// `m x 1` softmax weights.
    pub alpha: Var,
    /// `T x d` decoder memory.
    pub fused: Var,
    pub fused_mask: Vec<bool>,
}

/// Row indices of the `[CLS]` state and of the unmasked last-utterance states.
fn feature_groups(input: &AssembledInput) -> Result<(Vec<Vec<usize>>, Vec<Vec<usize>>), FusionError> {
    let t = input.seq_len;
    let mut cls = Vec::with_capacity(input.m);
    let mut lu = Vec::with_capacity(input.m);
    for i in 0..input.m {
        cls.push(vec![i * t]);
        let rows: Vec<usize> = input
            .last_utterance_span
            .clone()
            .filter(|&j| input.attention_mask[[i, j]] != 0)
            .map(|j| i * t + j)
            .collect();
        if rows.is_empty() {
            return Err(FusionError::EmptySpan(i));
        }
        lu.push(rows);
    }
    Ok((cls, lu))
}

/// `m x 2d` features `[h_CLS ; mean over the last utterance]` from packed states.
pub fn pool_features_var(
    g: &mut Graph<'_>,
    enc: Var,
    input: &AssembledInput,
) -> Result<Var, FusionError> {
    let rows = g.value(enc).nrows();
    if rows != input.m * input.seq_len {
        return Err(FusionError::ShapeMismatch(format!(
            "{rows} encoder rows for m={} T={}",
            input.m, input.seq_len
        )));
    }
    let (cls, lu) = feature_groups(input)?;
    let cls = g.row_mean(enc, cls);
    let lu = g.row_mean(enc, lu);
    Ok(g.concat_cols(cls, lu))
}

/// `raw = features · w + b`, an `m x 1` column.
pub fn score_var(g: &mut Graph<'_>, features: Var, weight: Var, bias: Var) -> Result<Var, FusionError> {
    let (fc, wr) = (g.value(features).ncols(), g.value(weight).nrows());
    if fc != wr || g.value(weight).ncols() != 1 || g.value(bias).dim() != (1, 1) {
        return Err(FusionError::ShapeMismatch(format!(
            "features have {fc} columns, scorer weight has {wr} rows"
        )));
    }
    let raw = g.matmul(features, weight);
    Ok(g.add_row(raw, bias))
}

fn union_mask(mask: &Array2<u8>) -> Vec<bool> {
    (0..mask.ncols())
        .map(|j| mask.column(j).iter().any(|&b| b != 0))
        .collect()
}

/// Aggregates packed encoder rows according to `mode`. The output mask is the
/// selected row's mask for `Max` and the union of row masks otherwise.
pub fn aggregate_var(
    g: &mut Graph<'_>,
    enc: Var,
    alpha: Var,
    mask: &Array2<u8>,
    mode: FusionMode,
) -> Result<(Var, Vec<bool>), FusionError> {
    let (m, t) = mask.dim();
    let a_len = g.value(alpha).len();
    if a_len != m || g.value(enc).nrows() != m * t {
        return Err(FusionError::ShapeMismatch(format!(
            "alpha has {a_len} entries, encoder has {} rows, mask is {m}x{t}",
            g.value(enc).nrows()
        )));
    }
    Ok(match mode {
        FusionMode::Fused => (g.weighted_group_sum(enc, alpha, t), union_mask(mask)),
        FusionMode::Mean => (g.group_mean(enc, t), union_mask(mask)),
        FusionMode::Max => {
            let best = argmax(g.value(alpha).as_slice().expect("contiguous alpha"));
            let row_mask = mask.row(best).iter().map(|&b| b != 0).collect();
            (g.select_group(enc, best, t), row_mask)
        }
    })
}

/// Full fusion step on the tape.
pub fn fuse(
    g: &mut Graph<'_>,
    enc: Var,
    input: &AssembledInput,
    scorer: Scorer,
    mode: FusionMode,
    temperature: f64,
) -> Result<FusionOutput, FusionError> {
    let features = pool_features_var(g, enc, input)?;
    let w = g.param(scorer.weight);
    let b = g.param(scorer.bias);
    let scores = score_var(g, features, w, b)?;
    let alpha = g.softmax(scores, temperature);
    let (fused, fused_mask) = aggregate_var(g, enc, alpha, &input.attention_mask, mode)?;
    Ok(FusionOutput {
        features,
        scores,
        alpha,
        fused,
        fused_mask,
    })
}

/// Array-level feature pooling.
pub fn pool_features(enc: &EncoderStates, input: &AssembledInput) -> Result<Array2<f64>, FusionError> {
    let (m, t, _) = enc.states.dim();
    if m != input.m || t != input.seq_len {
        return Err(FusionError::ShapeMismatch(format!(
            "states are {m}x{t}, input is {}x{}",
            input.m, input.seq_len
        )));
    }
    let mut g = Graph::detached();
    let e = g.constant(enc.packed());
    let f = pool_features_var(&mut g, e, input)?;
    Ok(g.value(f).clone())
}

/// Array-level linear scoring: `raw_i = w · feature_i + b`.
pub fn score(features: &Array2<f64>, weight: &[f64], bias: f64) -> Result<RelevanceScores, FusionError> {
    let mut g = Graph::detached();
    let f = g.constant(features.clone());
    let w = g.constant(Array2::from_shape_vec((weight.len(), 1), weight.to_vec()).expect("column"));
    let b = g.constant(Array2::from_elem((1, 1), bias));
    let raw = score_var(&mut g, f, w, b)?;
    Ok(RelevanceScores(g.value(raw).iter().copied().collect()))
}

/// `softmax(raw / temperature)`, stabilized by subtracting the maximum.
pub fn normalize(raw: &RelevanceScores, temperature: f64) -> KnowledgeDistribution {
    let mut g = Graph::detached();
    let r = g.constant(Array2::from_shape_vec((raw.0.len(), 1), raw.0.clone()).expect("column"));
    let a = g.softmax(r, temperature);
    KnowledgeDistribution(g.value(a).iter().copied().collect())
}

/// Array-level aggregation.
pub fn aggregate(
    enc: &EncoderStates,
    alpha: &KnowledgeDistribution,
    mode: FusionMode,
) -> Result<FusedState, FusionError> {
    let mut g = Graph::detached();
    let e = g.constant(enc.packed());
    let a = g.constant(
        Array2::from_shape_vec((alpha.len(), 1), alpha.as_slice().to_vec()).expect("column"),
    );
    let (fused, mask) = aggregate_var(&mut g, e, a, &enc.mask, mode)?;
    Ok(FusedState {
        states: g.value(fused).clone(),
        mask,
    })
}

/// Row `i` of the states as a `T x d` matrix.
pub fn row_states(enc: &EncoderStates, i: usize) -> Array2<f64> {
    enc.states.slice(s![i, .., ..]).to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{DialogueTurn, Utterance};
    use crate::encoding::{assemble, Tokenizer};
    use ndarray::{array, Array3};

    fn toy_input(pool: &[&str], user: &str) -> AssembledInput {
        let words = "a b c hi there r";
        let tok = Tokenizer::new(words.split_whitespace().map(String::from).collect()).unwrap();
        let turn = DialogueTurn::new(
            vec![Utterance::user(user)],
            pool.iter().map(|s| s.to_string()).collect(),
            None,
            "r",
        )
        .unwrap();
        assemble(&turn, &tok, 1, 1, 16).unwrap()
    }

    #[test]
    fn pool_features_mean_then_concat() {
        // rows: [CLS] k <user> hi there ; LU span = 3..5
        let input = toy_input(&["a"], "hi there");
        let mut states = Array3::zeros((1, 5, 2));
        states.slice_mut(s![0, 0, ..]).assign(&array![1.0, 2.0]);
        states.slice_mut(s![0, 3, ..]).assign(&array![0.0, 0.0]);
        states.slice_mut(s![0, 4, ..]).assign(&array![2.0, 4.0]);
        let enc = EncoderStates {
            states,
            mask: input.attention_mask.clone(),
        };
        let f = pool_features(&enc, &input).unwrap();
        assert_eq!(f, array![[1.0, 2.0, 1.0, 2.0]]);
    }

    #[test]
    fn single_token_utterance_and_identical_rows() {
        let input = toy_input(&["a", "a"], "hi");
        let mut states = Array3::zeros((2, 4, 3));
        for i in 0..2 {
            states.slice_mut(s![i, 3, ..]).assign(&array![0.5, -1.0, 2.0]);
            states.slice_mut(s![i, 0, ..]).assign(&array![1.0, 1.0, 1.0]);
        }
        let enc = EncoderStates {
            states,
            mask: input.attention_mask.clone(),
        };
        let f = pool_features(&enc, &input).unwrap();
        assert_eq!(f.row(0), f.row(1));
        assert_eq!(f.slice(s![0, 3..]).to_vec(), vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn empty_span_is_rejected() {
        let mut input = toy_input(&["a"], "hi");
        input.attention_mask[[0, 3]] = 0;
        let enc = EncoderStates {
            states: Array3::zeros((1, 4, 2)),
            mask: input.attention_mask.clone(),
        };
        assert_eq!(pool_features(&enc, &input), Err(FusionError::EmptySpan(0)));
    }

    #[test]
    fn scoring() {
        let s = score(&array![[2.0, 1.0]], &[1.0, -1.0], 0.0).unwrap();
        assert_eq!(s.0, vec![1.0]);
        let s = score(&array![[2.0, 1.0], [5.0, -3.0]], &[0.0, 0.0], 3.0).unwrap();
        assert_eq!(s.0, vec![3.0, 3.0]);
        let s = score(&array![[0.3, 0.7], [0.3, 0.7]], &[0.2, 1.1], -0.4).unwrap();
        assert_eq!(s.0[0], s.0[1]);
        assert!(matches!(score(&array![[1.0, 2.0, 3.0]], &[1.0, 1.0], 0.0), Err(FusionError::ShapeMismatch(_))));
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize(&RelevanceScores(vec![0.0, 0.0]), 1.0).as_slice(), &[0.5, 0.5]);
        let a = normalize(&RelevanceScores(vec![std::f64::consts::LN_2, 0.0]), 1.0);
        assert!((a.as_slice()[0] - 2.0 / 3.0).abs() < 1e-9);
        assert!((a.as_slice()[1] - 1.0 / 3.0).abs() < 1e-9);
        let base = normalize(&RelevanceScores(vec![0.3, -1.2, 2.0]), 0.5);
        let shifted = normalize(&RelevanceScores(vec![100.3, 98.8, 102.0]), 0.5);
        for (x, y) in base.as_slice().iter().zip(shifted.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
        let huge = normalize(&RelevanceScores(vec![1e308, -1e308]), 1.0);
        assert_eq!(huge.as_slice(), &[1.0, 0.0]);
    }

    fn constant_rows(values: &[f64], t: usize, d: usize) -> EncoderStates {
        let m = values.len();
        let states = Array3::from_shape_fn((m, t, d), |(i, _, _)| values[i]);
        EncoderStates {
            states,
            mask: Array2::ones((m, t)),
        }
    }

    #[test]
    fn aggregation_modes() {
        let enc = constant_rows(&[2.0, 4.0], 3, 2);
        let half = KnowledgeDistribution::new(vec![0.5, 0.5]).unwrap();
        let fused = aggregate(&enc, &half, FusionMode::Fused).unwrap();
        assert!(fused.states.iter().all(|&x| x == 3.0));

        let enc = constant_rows(&[1.0, 5.0, 9.0], 2, 2);
        let a = KnowledgeDistribution::new(vec![0.3, 0.3, 0.4]).unwrap();
        let max = aggregate(&enc, &a, FusionMode::Max).unwrap();
        assert!(max.states.iter().all(|&x| x == 9.0));
        let one_hot = KnowledgeDistribution::one_hot(3, 1);
        let f = aggregate(&enc, &one_hot, FusionMode::Fused).unwrap();
        let mx = aggregate(&enc, &one_hot, FusionMode::Max).unwrap();
        assert_eq!(f.states, row_states(&enc, 1));
        assert_eq!(mx.states, row_states(&enc, 1));
        let mean = aggregate(&enc, &one_hot, FusionMode::Mean).unwrap();
        assert!(mean.states.iter().all(|&x| (x - 5.0).abs() < 1e-12));

        let wrong = KnowledgeDistribution::uniform(2);
        assert!(matches!(aggregate(&enc, &wrong, FusionMode::Fused), Err(FusionError::ShapeMismatch(_))));
    }

    #[test]
    fn max_mask_follows_the_selected_row() {
        let mut enc = constant_rows(&[1.0, 2.0], 3, 1);
        enc.mask[[0, 1]] = 0;
        let pick0 = aggregate(&enc, &KnowledgeDistribution::one_hot(2, 0), FusionMode::Max).unwrap();
        assert_eq!(pick0.mask, vec![true, false, true]);
        let fused = aggregate(&enc, &KnowledgeDistribution::uniform(2), FusionMode::Fused).unwrap();
        assert_eq!(fused.mask, vec![true, true, true]);
    }

    #[test]
    fn distribution_validation_and_ties() {
        assert!(KnowledgeDistribution::new(vec![0.6, 0.6]).is_err());
        assert!(KnowledgeDistribution::new(vec![-0.1, 1.1]).is_err());
        assert!(KnowledgeDistribution::new(vec![]).is_err());
        assert_eq!(KnowledgeDistribution::uniform(4).argmax(), 0);
        assert_eq!("MAX".parse::<FusionMode>().unwrap(), FusionMode::Max);
    }
}
