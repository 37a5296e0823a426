//! Dialogue turns with candidate knowledge pools, JSONL ingestion, data-setting
//! filters and a deterministic synthetic corpus.
//!
//! The JSONL format has one turn per line:
//!
//! ```json
//! {"context":[{"speaker":"user","text":"..."}],"knowledge":["..."],"gold_index":0,"response":"..."}
//! ```
//!
//! `gold_index` is optional. A pool entry equal to [`NO_KNOWLEDGE`] stands for
//! "no passage was used"; a turn whose gold points at it does not use knowledge.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Pool entry meaning that no knowledge was chosen for the response.
pub const NO_KNOWLEDGE: &str = "no_passages_used";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("line {line}: gold_index {gold} outside a pool of {pool_size}")]
    GoldOutOfRange {
        line: usize,
        gold: i64,
        pool_size: usize,
    },
    #[error("synthetic spec infeasible: {0}")]
    SpecInfeasible(String),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("split fractions must be non-negative and sum to 1, got {0:?}")]
    BadFractions(Vec<f64>),
    #[error("invalid turn: {0}")]
    InvalidTurn(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    Agent,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: Speaker,
    pub text: String,
}

impl Utterance {
    pub fn user(text: impl Into<String>) -> Self {
        Self {
            speaker: Speaker::User,
            text: text.into(),
        }
    }

    pub fn agent(text: impl Into<String>) -> Self {
        Self {
            speaker: Speaker::Agent,
            text: text.into(),
        }
    }
}

/// Which turns a dataset keeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Setting {
    /// Every turn, including those that used no knowledge.
    #[serde(rename = "all")]
    All,
    /// Only turns whose response used a knowledge passage.
    #[serde(rename = "wkn")]
    WithKnowledge,
}

impl std::str::FromStr for Setting {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "all" => Ok(Setting::All),
            "wkn" | "w/kn" => Ok(Setting::WithKnowledge),
            other => Err(format!("unknown setting {other:?} (expected all|wkn)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    TestSeen,
    TestUnseen,
}

/// One training or evaluation sample.
#[derive(Clone, Debug, PartialEq)]
pub struct DialogueTurn {
    pub context: Vec<Utterance>,
    pub pool: Vec<String>,
    pub gold_index: Option<usize>,
    pub response: String,
    pub uses_knowledge: bool,
}

impl DialogueTurn {
    /// Builds a turn, normalizing whitespace and checking every invariant.
    pub fn new(
        context: Vec<Utterance>,
        pool: Vec<String>,
        gold_index: Option<usize>,
        response: impl Into<String>,
    ) -> Result<Self, CorpusError> {
        let context: Vec<Utterance> = context
            .into_iter()
            .map(|u| Utterance {
                speaker: u.speaker,
                text: u.text.trim().to_string(),
            })
            .collect();
        let Some(last) = context.last() else {
            return Err(CorpusError::InvalidTurn("empty context".into()));
        };
        if last.speaker != Speaker::User {
            return Err(CorpusError::InvalidTurn(
                "last context utterance must come from the user".into(),
            ));
        }
        if let Some(i) = context.iter().position(|u| u.text.is_empty()) {
            return Err(CorpusError::InvalidTurn(format!("utterance {i} is empty")));
        }
        if pool.is_empty() {
            return Err(CorpusError::InvalidTurn("empty knowledge pool".into()));
        }
        if pool.iter().filter(|k| k.as_str() == NO_KNOWLEDGE).count() > 1 {
            return Err(CorpusError::InvalidTurn(
                "more than one no-knowledge entry in the pool".into(),
            ));
        }
        if let Some(g) = gold_index {
            if g >= pool.len() {
                return Err(CorpusError::InvalidTurn(format!(
                    "gold_index {g} outside a pool of {}",
                    pool.len()
                )));
            }
        }
        let uses_knowledge = gold_index.is_some_and(|g| pool[g] != NO_KNOWLEDGE);
        Ok(Self {
            context,
            pool,
            gold_index,
            response: response.into().trim().to_string(),
            uses_knowledge,
        })
    }

    pub fn pool_size(&self) -> usize {
        self.pool.len()
    }

    /// The gold passage when the turn uses knowledge.
    pub fn gold_knowledge(&self) -> Option<&str> {
        match self.gold_index {
            Some(g) if self.uses_knowledge => Some(&self.pool[g]),
            _ => None,
        }
    }

    pub fn last_user_utterance(&self) -> &Utterance {
        self.context.last().expect("context is never empty")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub turns: Vec<DialogueTurn>,
    pub split: Split,
    pub setting: Setting,
}

impl Dataset {
    pub fn new(turns: Vec<DialogueTurn>, split: Split, setting: Setting) -> Self {
        let mut d = Self {
            turns,
            split,
            setting: Setting::All,
        };
        if setting == Setting::WithKnowledge {
            d = d.with_setting(Setting::WithKnowledge);
        }
        d
    }

    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    /// Applies a data setting. Filtering keeps the original turn order.
    pub fn with_setting(self, setting: Setting) -> Self {
        let turns = match setting {
            Setting::All => self.turns,
            Setting::WithKnowledge => self
                .turns
                .into_iter()
                .filter(|t| t.uses_knowledge)
                .collect(),
        };
        Self {
            turns,
            split: self.split,
            setting,
        }
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// Serializes the turns in the JSONL interchange format.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for t in &self.turns {
            let record = TurnRecord {
                context: t.context.clone(),
                knowledge: t.pool.clone(),
                gold_index: t.gold_index.map(|g| g as i64),
                response: t.response.clone(),
            };
            let line = serde_json::to_string(&record).expect("turn records always serialize");
            let _ = writeln!(out, "{line}");
        }
        out
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        fs::write(path, self.to_jsonl())?;
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TurnRecord {
    context: Vec<Utterance>,
    knowledge: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gold_index: Option<i64>,
    response: String,
}

/// Parses JSONL text. Blank lines are skipped; line numbers are 1-based.
pub fn parse_jsonl(text: &str, split: Split, setting: Setting) -> Result<Dataset, CorpusError> {
    let mut turns = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let record: TurnRecord =
            serde_json::from_str(raw).map_err(|e| CorpusError::MalformedLine {
                line,
                reason: e.to_string(),
            })?;
        let gold_index = match record.gold_index {
            None => None,
            Some(g) if g < 0 || g as usize >= record.knowledge.len() => {
                return Err(CorpusError::GoldOutOfRange {
                    line,
                    gold: g,
                    pool_size: record.knowledge.len(),
                })
            }
            Some(g) => Some(g as usize),
        };
        let turn = DialogueTurn::new(record.context, record.knowledge, gold_index, record.response)
            .map_err(|e| CorpusError::MalformedLine {
                line,
                reason: e.to_string(),
            })?;
        turns.push(turn);
    }
    Ok(Dataset::new(turns, split, setting))
}

/// Loads a JSONL file as a training split.
pub fn load_jsonl(path: impl AsRef<Path>, setting: Setting) -> Result<Dataset, CorpusError> {
    load_jsonl_split(path, Split::Train, setting)
}

pub fn load_jsonl_split(
    path: impl AsRef<Path>,
    split: Split,
    setting: Setting,
) -> Result<Dataset, CorpusError> {
    let text = fs::read_to_string(path)?;
    parse_jsonl(&text, split, setting)
}

/// Partitions turns in order. Each part gets `floor(n * fraction)` turns and the
/// rounding remainder goes to the first part.
pub fn split_dataset(d: &Dataset, fractions: &[f64]) -> Result<Vec<Dataset>, CorpusError> {
    let total: f64 = fractions.iter().sum();
    if fractions.is_empty()
        || fractions.iter().any(|f| !f.is_finite() || *f < 0.0)
        || (total - 1.0).abs() > 1e-9
    {
        return Err(CorpusError::BadFractions(fractions.to_vec()));
    }
    let n = d.len();
    let mut sizes: Vec<usize> = fractions
        .iter()
        .map(|f| ((n as f64) * f).floor() as usize)
        .collect();
    let assigned: usize = sizes.iter().sum();
    sizes[0] += n.saturating_sub(assigned);
    let mut out = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for size in sizes {
        let end = (start + size).min(n);
        out.push(Dataset {
            turns: d.turns[start..end].to_vec(),
            split: d.split,
            setting: d.setting,
        });
        start = end;
    }
    Ok(out)
}

/// Words the synthetic task builds responses and contexts from.
const RESPONSE_PREFIX: [&str; 4] = ["sure", "i", "know", "that"];
const RESPONSE_SUFFIX: &str = ".";
const USER_FILLERS: [&str; 6] = ["tell", "me", "about", "what", "of", "please"];
const AGENT_FILLERS: [&str; 5] = ["hello", "nice", "to", "chat", "you"];

/// Number of special tokens every tokenizer reserves.
pub const NUM_SPECIALS: usize = 6;

/// Parameters of the synthetic knowledge-selection task.
///
/// Every topic owns `facts_per_topic` fact words. A pool option is a topic word
/// followed by `facts_per_option` of that topic's facts in random order; the user
/// names one topic and the response repeats the facts of the matching option.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub vocab_size: usize,
    pub num_topics: usize,
    pub pool_size: usize,
    pub facts_per_topic: usize,
    #[serde(default = "default_facts_per_option")]
    pub facts_per_option: usize,
    pub noise_rate: f64,
    pub seed: u64,
}

fn default_facts_per_option() -> usize {
    3
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            num_topics: 24,
            pool_size: 5,
            facts_per_topic: 6,
            facts_per_option: 3,
            noise_rate: 0.0,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    /// Template words plus specials that every synthetic vocabulary reserves.
    pub fn reserved_tokens() -> usize {
        let mut words: Vec<&str> = RESPONSE_PREFIX
            .iter()
            .chain(USER_FILLERS.iter())
            .chain(AGENT_FILLERS.iter())
            .copied()
            .collect();
        words.push(RESPONSE_SUFFIX);
        words.sort_unstable();
        words.dedup();
        words.len() + NUM_SPECIALS
    }

    pub fn min_vocab_size(&self) -> usize {
        self.num_topics + self.facts_per_topic * self.num_topics + Self::reserved_tokens()
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.pool_size < 2 {
            return Err(CorpusError::InvalidSpec("pool_size must be at least 2".into()));
        }
        if self.num_topics < self.pool_size {
            return Err(CorpusError::SpecInfeasible(format!(
                "{} topics cannot fill pools of {} distinct topics",
                self.num_topics, self.pool_size
            )));
        }
        if self.facts_per_topic == 0
            || self.facts_per_option == 0
            || self.facts_per_option > self.facts_per_topic
        {
            return Err(CorpusError::InvalidSpec(
                "need 1 <= facts_per_option <= facts_per_topic".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(CorpusError::InvalidSpec("noise_rate must lie in [0, 1]".into()));
        }
        if self.vocab_size < self.min_vocab_size() {
            return Err(CorpusError::InvalidSpec(format!(
                "vocab_size {} below the minimum {}",
                self.vocab_size,
                self.min_vocab_size()
            )));
        }
        if self.noise_rate > 0.0 && self.vocab_size == self.min_vocab_size() {
            return Err(CorpusError::InvalidSpec(
                "noise needs at least one spare vocabulary word".into(),
            ));
        }
        Ok(())
    }

    pub fn topic_word(t: usize) -> String {
        format!("topic{t}")
    }

    pub fn fact_word(t: usize, j: usize) -> String {
        format!("fact{t}_{j}")
    }

    fn spare_words(&self) -> Vec<String> {
        (0..self.vocab_size - self.min_vocab_size())
            .map(|k| format!("w{k}"))
            .collect()
    }

    /// The ordinary (non-special) words of the task, `vocab_size - NUM_SPECIALS` of them.
    pub fn vocabulary(&self) -> Vec<String> {
        let mut words: Vec<String> = RESPONSE_PREFIX
            .iter()
            .chain(USER_FILLERS.iter())
            .chain(AGENT_FILLERS.iter())
            .map(|w| w.to_string())
            .collect();
        words.push(RESPONSE_SUFFIX.to_string());
        let mut seen = std::collections::HashSet::new();
        words.retain(|w| seen.insert(w.clone()));
        for t in 0..self.num_topics {
            words.push(Self::topic_word(t));
            for j in 0..self.facts_per_topic {
                words.push(Self::fact_word(t, j));
            }
        }
        words.extend(self.spare_words());
        words
    }

    /// Words a noise-free response may contain besides the gold facts.
    pub fn template_words() -> Vec<&'static str> {
        let mut w = RESPONSE_PREFIX.to_vec();
        w.push(RESPONSE_SUFFIX);
        w
    }
}

/// Generates `n_turns` synthetic turns. The output is a pure function of
/// `spec` (including its seed) and `n_turns`.
pub fn generate_synthetic(spec: &SyntheticSpec, n_turns: usize) -> Result<Dataset, CorpusError> {
    spec.validate()?;
    if n_turns == 0 {
        return Err(CorpusError::InvalidSpec("n_turns must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let spare = spec.spare_words();
    let topics: Vec<usize> = (0..spec.num_topics).collect();
    let mut turns = Vec::with_capacity(n_turns);
    for _ in 0..n_turns {
        let gold_topic = rng.random_range(0..spec.num_topics);
        let others: Vec<usize> = topics.iter().copied().filter(|&t| t != gold_topic).collect();
        let mut pool_topics: Vec<usize> = others
            .choose_multiple(&mut rng, spec.pool_size - 1)
            .copied()
            .collect();
        let gold_index = rng.random_range(0..spec.pool_size);
        pool_topics.insert(gold_index, gold_topic);

        let mut gold_facts = Vec::new();
        let pool: Vec<String> = pool_topics
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let mut facts: Vec<usize> = (0..spec.facts_per_topic).collect();
                facts.shuffle(&mut rng);
                facts.truncate(spec.facts_per_option);
                let words: Vec<String> = facts.iter().map(|&j| SyntheticSpec::fact_word(t, j)).collect();
                if i == gold_index {
                    gold_facts = words.clone();
                }
                format!("{} {}", SyntheticSpec::topic_word(t), words.join(" "))
            })
            .collect();

        let mut context = Vec::new();
        if rng.random_bool(0.5) {
            let n = rng.random_range(2..=3);
            let words: Vec<&str> = (0..n)
                .map(|_| *AGENT_FILLERS.choose(&mut rng).expect("non-empty"))
                .collect();
            context.push(Utterance::agent(words.join(" ")));
        }
        let mut words: Vec<String> = (0..rng.random_range(1..=3))
            .map(|_| USER_FILLERS.choose(&mut rng).expect("non-empty").to_string())
            .collect();
        let at = rng.random_range(0..=words.len());
        words.insert(at, SyntheticSpec::topic_word(gold_topic));
        context.push(Utterance::user(words.join(" ")));

        let mut response: Vec<String> = RESPONSE_PREFIX.iter().map(|w| w.to_string()).collect();
        for fact in gold_facts {
            if spec.noise_rate > 0.0 && rng.random_bool(spec.noise_rate) {
                response.push(spare.choose(&mut rng).expect("validated spare words").clone());
            } else {
                response.push(fact);
            }
        }
        response.push(RESPONSE_SUFFIX.to_string());

        turns.push(DialogueTurn::new(context, pool, Some(gold_index), response.join(" "))?);
    }
    Ok(Dataset::new(turns, Split::Train, Setting::All))
}
