//! Evaluation metrics: R@1, unigram F1, knowledge F1, ROUGE-1/L, perplexity and
//! the localization metric `Loc`.
//!
//! All text metrics share one normalizer: lowercase, drop punctuation, split on
//! whitespace.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Setting;
use crate::fusion::{argmax, KnowledgeDistribution};

/// Identifies the text normalizer in reports.
pub const NORMALIZER_VERSION: &str = "lowercase+strip-punct+ws/1";

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("turn has no gold index")]
    GoldMissing,
    #[error("perplexity needs at least one token")]
    NoTokens,
    #[error("localization is undefined for a single option")]
    SingleOption,
}

pub fn normalize_text(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .filter(|c| !(c.is_ascii_punctuation() || (!c.is_ascii() && is_unicode_punct(*c))))
        .collect::<String>()
        .split_whitespace()
        .map(String::from)
        .collect()
}

fn is_unicode_punct(c: char) -> bool {
    matches!(c, '\u{2010}'..='\u{2027}' | '\u{2030}'..='\u{205E}' | '\u{00A1}' | '\u{00BF}' | '\u{00AB}' | '\u{00BB}')
}

fn counts(tokens: &[String]) -> HashMap<&str, usize> {
    let mut m = HashMap::new();
    for t in tokens {
        *m.entry(t.as_str()).or_insert(0) += 1;
    }
    m
}

fn f_measure(overlap: usize, pred_len: usize, ref_len: usize) -> f64 {
    if overlap == 0 || pred_len == 0 || ref_len == 0 {
        return 0.0;
    }
    let p = overlap as f64 / pred_len as f64;
    let r = overlap as f64 / ref_len as f64;
    2.0 * p * r / (p + r)
}

/// Clipped bag-of-words overlap F1 between normalized token lists.
pub fn unigram_f1(prediction: &str, reference: &str) -> f64 {
    let pred = normalize_text(prediction);
    let reference = normalize_text(reference);
    let rc = counts(&reference);
    let overlap = counts(&pred)
        .iter()
        .map(|(t, &c)| c.min(rc.get(t).copied().unwrap_or(0)))
        .sum();
    f_measure(overlap, pred.len(), reference.len())
}

/// Unigram F1 against the gold knowledge passage.
pub fn kf1(prediction: &str, gold_knowledge: &str) -> f64 {
    unigram_f1(prediction, gold_knowledge)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RougeMode {
    R1,
    RL,
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-1 (unigram overlap F) or ROUGE-L (LCS F with β = 1).
pub fn rouge(prediction: &str, reference: &str, mode: RougeMode) -> f64 {
    match mode {
        RougeMode::R1 => unigram_f1(prediction, reference),
        RougeMode::RL => {
            let pred = normalize_text(prediction);
            let reference = normalize_text(reference);
            f_measure(lcs_len(&pred, &reference), pred.len(), reference.len())
        }
    }
}

/// `exp(total_nll / token_count)`.
pub fn perplexity(total_nll: f64, token_count: usize) -> Result<f64, MetricError> {
    if token_count == 0 {
        return Err(MetricError::NoTokens);
    }
    Ok((total_nll / token_count as f64).exp())
}

/// 1 when the highest weight (lowest index on ties) sits on the gold option.
pub fn recall_at_1(alpha: &[f64], gold_index: Option<usize>) -> Result<u8, MetricError> {
    let gold = gold_index.ok_or(MetricError::GoldMissing)?;
    Ok(u8::from(argmax(alpha) == gold))
}

/// Deviation of `p` from uniform toward one-hot:
/// `(1 − cos∠(p, u)) / (1 − cos∠(o, u))`, where `cos∠(o, u) = 1/√m`.
pub fn localization(p: &[f64]) -> Result<f64, MetricError> {
    let m = p.len();
    if m < 2 {
        return Err(MetricError::SingleOption);
    }
    let norm = p.iter().map(|x| x * x).sum::<f64>().sqrt();
    let cos_pu = p.iter().sum::<f64>() / ((m as f64).sqrt() * norm);
    let cos_ou = 1.0 / (m as f64).sqrt();
    Ok(((1.0 - cos_pu) / (1.0 - cos_ou)).clamp(0.0, 1.0))
}

pub fn localization_of(p: &KnowledgeDistribution) -> Result<f64, MetricError> {
    localization(p.as_slice())
}

/// Neumaier-compensated running sum.
#[derive(Clone, Copy, Debug, Default)]
pub struct CompensatedSum {
    sum: f64,
    compensation: f64,
    count: usize,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.compensation += (self.sum - t) + x;
        } else {
            self.compensation += (x - t) + self.sum;
        }
        self.sum = t;
        self.count += 1;
    }

    pub fn total(&self) -> f64 {
        self.sum + self.compensation
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Mean of the added values, 0 when empty.
    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.total() / self.count as f64
        }
    }
}

/// Corpus-level evaluation results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub setting: Setting,
    pub turns: usize,
    pub r_at_1: f64,
    /// Turns with a gold index; ungolded turns are not counted in R@1.
    pub r_at_1_count: usize,
    pub f1: f64,
    pub kf1: f64,
    pub kf1_count: usize,
    pub rouge1: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub ppl: f64,
    pub nll_tokens: usize,
    pub mean_loc: f64,
    pub loc_count: usize,
    pub normalizer: String,
    pub decoding: String,
    pub r_at_1_excludes_ungolded: bool,
}

/// Per-turn measurements folded into an [`EvalReport`].
#[derive(Clone, Debug, Default)]
pub struct MetricAccumulator {
    turns: usize,
    r_at_1: CompensatedSum,
    f1: CompensatedSum,
    kf1: CompensatedSum,
    rouge1: CompensatedSum,
    rouge_l: CompensatedSum,
    nll: CompensatedSum,
    tokens: usize,
    loc: CompensatedSum,
}

/// What one evaluated turn contributes.
#[derive(Clone, Debug)]
pub struct TurnMeasurement<'a> {
    pub alpha: &'a [f64],
    pub gold_index: Option<usize>,
    pub gold_knowledge: Option<&'a str>,
    pub prediction: &'a str,
    pub reference: &'a str,
    /// Summed NLL over the turn's target tokens.
    pub nll_sum: f64,
    pub tokens: usize,
}

impl MetricAccumulator {
    pub fn add(&mut self, t: &TurnMeasurement<'_>) {
        self.turns += 1;
        if let Ok(hit) = recall_at_1(t.alpha, t.gold_index) {
            self.r_at_1.add(f64::from(hit));
        }
        if let Some(k) = t.gold_knowledge {
            self.kf1.add(kf1(t.prediction, k));
        }
        self.f1.add(unigram_f1(t.prediction, t.reference));
        self.rouge1.add(rouge(t.prediction, t.reference, RougeMode::R1));
        self.rouge_l.add(rouge(t.prediction, t.reference, RougeMode::RL));
        self.nll.add(t.nll_sum);
        self.tokens += t.tokens;
        if let Ok(l) = localization(t.alpha) {
            self.loc.add(l);
        }
    }

    pub fn finish(&self, setting: Setting, decoding: &str) -> Result<EvalReport, MetricError> {
        Ok(EvalReport {
            setting,
            turns: self.turns,
            r_at_1: self.r_at_1.mean(),
            r_at_1_count: self.r_at_1.count(),
            f1: self.f1.mean(),
            kf1: self.kf1.mean(),
            kf1_count: self.kf1.count(),
            rouge1: self.rouge1.mean(),
            rouge_l: self.rouge_l.mean(),
            ppl: perplexity(self.nll.total(), self.tokens)?,
            nll_tokens: self.tokens,
            mean_loc: self.loc.mean(),
            loc_count: self.loc.count(),
            normalizer: NORMALIZER_VERSION.to_string(),
            decoding: decoding.to_string(),
            r_at_1_excludes_ungolded: true,
        })
    }
}
