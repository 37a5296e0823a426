//! Tokenization and assembly of the `m` aligned knowledge-history rows.
//!
//! Row `r` of an assembled turn is
//! `[CLS] ⊕ pad_truncate(pool[r], k_len) ⊕ <tag> u₁ ⊕ <tag> u₂ ⊕ …`,
//! so the knowledge span and the history occupy the same positions in every row
//! and a position-wise weighted sum over rows never mixes knowledge with history.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::Path;

use ndarray::Array2;
use thiserror::Error;

use crate::corpus::{DialogueTurn, Speaker, NUM_SPECIALS};

#[derive(Debug, Error)]
pub enum EncodingError {
    #[error("token {0:?} is not in the vocabulary")]
    OutOfVocabulary(String),
    #[error("knowledge pool is empty")]
    EmptyPool,
    #[error("invalid assembly arguments: {0}")]
    InvalidArguments(String),
    #[error("bad vocabulary: {0}")]
    BadVocabulary(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// The reserved tokens. Their ids follow the ordinary vocabulary in this order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Special {
    Cls,
    Pad,
    Bos,
    Eos,
    UserTag,
    AgentTag,
}

impl Special {
    pub const ALL: [Special; NUM_SPECIALS] = [
        Special::Cls,
        Special::Pad,
        Special::Bos,
        Special::Eos,
        Special::UserTag,
        Special::AgentTag,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Special::Cls => "cls",
            Special::Pad => "pad",
            Special::Bos => "bos",
            Special::Eos => "eos",
            Special::UserTag => "user",
            Special::AgentTag => "agent",
        }
    }

    pub fn default_text(self) -> &'static str {
        match self {
            Special::Cls => "[CLS]",
            Special::Pad => "<pad>",
            Special::Bos => "<s>",
            Special::Eos => "</s>",
            Special::UserTag => "<user>",
            Special::AgentTag => "<agent>",
        }
    }

    fn offset(self) -> usize {
        Special::ALL.iter().position(|s| *s == self).expect("listed")
    }

    /// Tags added for dialogue structure; a pretrained backbone would not have them.
    pub fn is_dialogue_tag(self) -> bool {
        matches!(self, Special::UserTag | Special::AgentTag)
    }
}

/// What the assembly code needs from a tokenizer. Subword tokenizers for real
/// data plug in here; [`Tokenizer`] is the exact whitespace implementation.
pub trait TextEncoder {
    fn encode(&self, text: &str) -> Result<Vec<u32>, EncodingError>;
    fn decode(&self, ids: &[u32]) -> String;
    fn special(&self, s: Special) -> u32;
    fn vocab_size(&self) -> usize;
}

/// Whitespace tokenizer over a fixed word list.
#[derive(Clone, Debug, PartialEq)]
pub struct Tokenizer {
    words: Vec<String>,
    index: HashMap<String, u32>,
    specials: [String; NUM_SPECIALS],
    unk: Option<u32>,
}

/// Word that unknown tokens map to, when the vocabulary contains it.
pub const UNK_WORD: &str = "<unk>";

const VOCAB_MAGIC: &str = "#kmine-vocab v1";

impl Tokenizer {
    pub fn new(words: Vec<String>) -> Result<Self, EncodingError> {
        let specials = Special::ALL.map(|s| s.default_text().to_string());
        Self::with_specials(words, specials)
    }

    pub fn with_specials(
        words: Vec<String>,
        specials: [String; NUM_SPECIALS],
    ) -> Result<Self, EncodingError> {
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(EncodingError::BadVocabulary(format!("word {i} {w:?}")));
            }
            if specials.contains(w) {
                return Err(EncodingError::BadVocabulary(format!("{w:?} is a special token")));
            }
            if index.insert(w.clone(), i as u32).is_some() {
                return Err(EncodingError::BadVocabulary(format!("duplicate word {w:?}")));
            }
        }
        let mut uniq = specials.to_vec();
        uniq.sort();
        uniq.dedup();
        if uniq.len() != NUM_SPECIALS {
            return Err(EncodingError::BadVocabulary("special tokens must be distinct".into()));
        }
        let unk = index.get(UNK_WORD).copied();
        Ok(Self {
            words,
            index,
            specials,
            unk,
        })
    }

    /// Word list in first-seen order over knowledge, context and responses,
    /// plus [`UNK_WORD`] so unseen evaluation words still encode.
    pub fn from_turns<'a>(turns: impl IntoIterator<Item = &'a DialogueTurn>) -> Self {
        let mut words = Vec::new();
        let mut seen = std::collections::HashSet::new();
        let mut add = |text: &str| {
            for w in text.split_whitespace() {
                if seen.insert(w.to_string()) {
                    words.push(w.to_string());
                }
            }
        };
        for t in turns {
            t.pool.iter().for_each(|k| add(k));
            t.context.iter().for_each(|u| add(&u.text));
            add(&t.response);
        }
        let specials: Vec<&str> = Special::ALL.iter().map(|s| s.default_text()).collect();
        words.retain(|w| !specials.contains(&w.as_str()));
        if !seen.contains(UNK_WORD) {
            words.push(UNK_WORD.to_string());
        }
        Self::new(words).expect("words come from whitespace splitting")
    }

    pub fn num_words(&self) -> usize {
        self.words.len()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn token_text(&self, id: u32) -> Option<&str> {
        let id = id as usize;
        if id < self.words.len() {
            Some(&self.words[id])
        } else {
            self.specials.get(id - self.words.len()).map(String::as_str)
        }
    }

    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) >= self.words.len()
    }

    /// Decodes only ordinary words, dropping every special token.
    pub fn decode_words(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| !self.is_special(id))
            .filter_map(|&id| self.token_text(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Vocabulary file: a header block declaring the specials, then one word per
    /// line where the line index after the header is the id.
    pub fn to_vocab_file(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{VOCAB_MAGIC}");
        for (s, text) in Special::ALL.iter().zip(&self.specials) {
            let _ = writeln!(out, "#special {} {}", s.key(), text);
        }
        let _ = writeln!(out, "#end");
        for w in &self.words {
            let _ = writeln!(out, "{w}");
        }
        out
    }

    pub fn parse_vocab_file(text: &str) -> Result<Self, EncodingError> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(VOCAB_MAGIC) {
            return Err(EncodingError::BadVocabulary("missing header line".into()));
        }
        let mut specials: [Option<String>; NUM_SPECIALS] = Default::default();
        loop {
            let line = lines
                .next()
                .ok_or_else(|| EncodingError::BadVocabulary("unterminated header".into()))?
                .trim();
            if line == "#end" {
                break;
            }
            let mut parts = line.split_whitespace();
            let (Some("#special"), Some(key), Some(text), None) =
                (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(EncodingError::BadVocabulary(format!("bad header line {line:?}")));
            };
            let s = Special::ALL
                .iter()
                .find(|s| s.key() == key)
                .ok_or_else(|| EncodingError::BadVocabulary(format!("unknown special {key}")))?;
            specials[s.offset()] = Some(text.to_string());
        }
        let specials = specials.map(|s| s.unwrap_or_default());
        if specials.iter().any(String::is_empty) {
            return Err(EncodingError::BadVocabulary("every special must be declared".into()));
        }
        let words = lines.map(|l| l.trim_end_matches('\r').to_string()).collect();
        Self::with_specials(words, specials)
    }

    pub fn read_vocab(path: impl AsRef<Path>) -> Result<Self, EncodingError> {
        Self::parse_vocab_file(&fs::read_to_string(path)?)
    }

    pub fn write_vocab(&self, path: impl AsRef<Path>) -> Result<(), EncodingError> {
        fs::write(path, self.to_vocab_file())?;
        Ok(())
    }
}

impl TextEncoder for Tokenizer {
    fn encode(&self, text: &str) -> Result<Vec<u32>, EncodingError> {
        text.split_whitespace()
            .map(|w| {
                if let Some(&id) = self.index.get(w) {
                    return Ok(id);
                }
                if let Some(pos) = self.specials.iter().position(|s| s == w) {
                    return Ok((self.words.len() + pos) as u32);
                }
                self.unk
                    .ok_or_else(|| EncodingError::OutOfVocabulary(w.to_string()))
            })
            .collect()
    }

    fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&id| self.token_text(id).unwrap_or("<?>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn special(&self, s: Special) -> u32 {
        (self.words.len() + s.offset()) as u32
    }

    fn vocab_size(&self) -> usize {
        self.words.len() + NUM_SPECIALS
    }
}

/// The `m` aligned token rows of one dialogue turn.
#[derive(Clone, Debug, PartialEq)]
pub struct AssembledInput {
    pub token_ids: Array2<u32>,
    /// `1` on real tokens, `0` exactly on PAD positions.
    pub attention_mask: Array2<u8>,
    pub knowledge_span: Range<usize>,
    /// Text tokens of the final user utterance, speaker tag excluded.
    pub last_utterance_span: Range<usize>,
    pub m: usize,
    pub seq_len: usize,
    /// Set when even the last utterance had to be cut to fit `max_len`.
    pub truncated_last_utterance: bool,
}

impl AssembledInput {
    /// Row-major token ids, `m * seq_len` long.
    pub fn flat_ids(&self) -> Vec<usize> {
        self.token_ids.iter().map(|&id| id as usize).collect()
    }

    /// Row-major mask flags, `m * seq_len` long.
    pub fn flat_mask(&self) -> Vec<bool> {
        self.attention_mask.iter().map(|&b| b != 0).collect()
    }
}

/// Builds the aligned rows for a turn.
///
/// Knowledge keeps its first `k_len` tokens. The history is the last
/// `history_window` utterances, each preceded by its speaker tag; whole older
/// utterances are dropped first when the row would exceed `max_len`, and if the
/// final utterance alone is too long its earliest tokens are cut.
pub fn assemble<E: TextEncoder + ?Sized>(
    turn: &DialogueTurn,
    tok: &E,
    k_len: usize,
    history_window: usize,
    max_len: usize,
) -> Result<AssembledInput, EncodingError> {
    if k_len == 0 || history_window == 0 {
        return Err(EncodingError::InvalidArguments(
            "k_len and history_window must be at least 1".into(),
        ));
    }
    if max_len < 1 + k_len + 2 {
        return Err(EncodingError::InvalidArguments(format!(
            "max_len {max_len} cannot hold [CLS], {k_len} knowledge tokens and a tagged token"
        )));
    }
    if turn.pool.is_empty() {
        return Err(EncodingError::EmptyPool);
    }
    let pad = tok.special(Special::Pad);
    let cls = tok.special(Special::Cls);

    let start = turn.context.len().saturating_sub(history_window);
    let mut utterances: Vec<Vec<u32>> = Vec::new();
    for u in &turn.context[start..] {
        let tag = match u.speaker {
            Speaker::User => tok.special(Special::UserTag),
            Speaker::Agent => tok.special(Special::AgentTag),
        };
        let mut ids = vec![tag];
        ids.extend(tok.encode(&u.text)?);
        utterances.push(ids);
    }
    let budget = max_len - 1 - k_len;
    let mut total: usize = utterances.iter().map(Vec::len).sum();
    while total > budget && utterances.len() > 1 {
        total -= utterances.remove(0).len();
    }
    let mut truncated = false;
    if total > budget {
        let last = utterances.last_mut().expect("at least one utterance");
        let keep = budget - 1;
        let cut = last.len() - 1 - keep;
        last.drain(1..1 + cut);
        truncated = true;
    }
    let history: Vec<u32> = utterances.concat();
    let last_len = utterances.last().map_or(0, Vec::len);
    let seq_len = 1 + k_len + history.len();
    let lu_end = seq_len;
    let lu_start = seq_len - last_len + 1;

    let m = turn.pool.len();
    let mut token_ids = Array2::from_elem((m, seq_len), pad);
    let mut attention_mask = Array2::zeros((m, seq_len));
    for (r, passage) in turn.pool.iter().enumerate() {
        let mut row = Vec::with_capacity(seq_len);
        row.push(cls);
        let mut k = tok.encode(passage)?;
        k.truncate(k_len);
        k.resize(k_len, pad);
        row.extend(k);
        row.extend_from_slice(&history);
        for (c, id) in row.into_iter().enumerate() {
            token_ids[[r, c]] = id;
            attention_mask[[r, c]] = u8::from(id != pad);
        }
    }
    Ok(AssembledInput {
        token_ids,
        attention_mask,
        knowledge_span: 1..1 + k_len,
        last_utterance_span: lu_start..lu_end,
        m,
        seq_len,
        truncated_last_utterance: truncated,
    })
}

/// Teacher-forcing target: `BOS ⊕ tokens ⊕ EOS`, at most `max_resp_len` ids,
/// always ending in EOS.
pub fn encode_response<E: TextEncoder + ?Sized>(
    turn: &DialogueTurn,
    tok: &E,
    max_resp_len: usize,
) -> Result<Vec<u32>, EncodingError> {
    encode_target(&turn.response, tok, max_resp_len)
}

pub fn encode_target<E: TextEncoder + ?Sized>(
    text: &str,
    tok: &E,
    max_resp_len: usize,
) -> Result<Vec<u32>, EncodingError> {
    let mut ids = vec![tok.special(Special::Bos)];
    ids.extend(tok.encode(text)?);
    ids.truncate(max_resp_len.max(2) - 1);
    ids.push(tok.special(Special::Eos));
    Ok(ids)
}
