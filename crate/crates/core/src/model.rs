//! Encoder-decoder backbone and the full fusion model.
//!
//! The encoder reads all `m` knowledge-history rows of a turn as one packed
//! `(m·T) x d` matrix with block-diagonal attention; the decoder attends over a
//! single `T x d` memory produced by [`crate::fusion`].

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{AttentionLayout, Graph, ParamGroup, ParamId, ParamStore, Var};
use crate::corpus::NUM_SPECIALS;
use crate::encoding::{AssembledInput, Special};
use crate::fusion::{self, EncoderStates, FusedState, FusionError, FusionMode, FusionOutput, Scorer};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Fusion(#[from] FusionError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    #[default]
    TinyRandom,
    /// Adapter slot for externally trained weights; no weights ship with this crate.
    PretrainedAdapter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers_enc: usize,
    pub n_layers_dec: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    /// Ordinary words plus the six specials.
    pub vocab_size: usize,
    pub dropout: f64,
    pub backbone: BackboneKind,
    pub max_positions: usize,
    pub init_std: f64,
    pub scorer_init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers_enc: 2,
            n_layers_dec: 2,
            n_heads: 4,
            ffn_dim: 256,
            vocab_size: 0,
            dropout: 0.1,
            backbone: BackboneKind::TinyRandom,
            max_positions: 128,
            init_std: 0.02,
            scorer_init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.vocab_size <= NUM_SPECIALS {
            return bad(format!("vocab_size {} leaves no ordinary words", self.vocab_size));
        }
        if self.ffn_dim == 0 || self.max_positions == 0 {
            return bad("ffn_dim and max_positions must be positive".into());
        }
        Ok(())
    }

    fn num_words(&self) -> usize {
        self.vocab_size - NUM_SPECIALS
    }
}

/// Per-forward state: dropout randomness and the cached embedding table node.
pub struct Runtime {
    dropout: Option<(f64, ChaCha8Rng)>,
    embeddings: Option<Var>,
}

impl Runtime {
    /// Deterministic forward pass with dropout disabled.
    pub fn eval() -> Self {
        Self {
            dropout: None,
            embeddings: None,
        }
    }

    /// Training forward pass; dropout is applied when `rate > 0`.
    pub fn train(rate: f64, seed: u64) -> Self {
        Self {
            dropout: (rate > 0.0).then(|| (rate, ChaCha8Rng::seed_from_u64(seed))),
            embeddings: None,
        }
    }

    fn drop(&mut self, g: &mut Graph<'_>, x: Var) -> Var {
        let Some((rate, rng)) = self.dropout.as_mut() else {
            return x;
        };
        let keep = 1.0 / (1.0 - *rate);
        let dim = g.value(x).raw_dim();
        let mask = Array2::from_shape_simple_fn(dim, || if rng.random::<f64>() < *rate { 0.0 } else { keep });
        g.dropout(x, mask)
    }
}

/// Interface a backbone provides to the fusion model: encoding of the aligned
/// rows and decoding against an arbitrary memory sequence.
pub trait Backbone: Send + Sync {
    fn config(&self) -> &ModelConfig;

    /// Encodes the `m` rows into a packed `(m·T) x d` node.
    fn encode_pairs(
        &self,
        g: &mut Graph<'_>,
        input: &AssembledInput,
        rt: &mut Runtime,
    ) -> Result<Var, ModelError>;

    /// Logits for every position of `decoder_input` (teacher forcing).
    fn decode_logits(
        &self,
        g: &mut Graph<'_>,
        memory: Var,
        memory_mask: &[bool],
        decoder_input: &[u32],
        rt: &mut Runtime,
    ) -> Result<Var, ModelError>;
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct AttentionBlock {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Clone, Copy, Debug)]
struct Ffn {
    up: Linear,
    down: Linear,
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    ln_attn: Norm,
    attn: AttentionBlock,
    ln_ffn: Norm,
    ffn: Ffn,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    ln_self: Norm,
    self_attn: AttentionBlock,
    ln_cross: Norm,
    cross_attn: AttentionBlock,
    ln_ffn: Norm,
    ffn: Ffn,
}

/// Pre-norm transformer with learned positions and a tied output projection.
#[derive(Clone, Debug)]
pub struct TinyTransformer {
    config: ModelConfig,
    tokens: ParamId,
    dialogue_tags: ParamId,
    enc_pos: ParamId,
    dec_pos: ParamId,
    encoder: Vec<EncoderLayer>,
    enc_norm: Norm,
    decoder: Vec<DecoderLayer>,
    dec_norm: Norm,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    std: f64,
}

impl Init<'_> {
    fn normal(&mut self, name: &str, rows: usize, cols: usize, std: f64, group: ParamGroup) -> ParamId {
        let value = if std > 0.0 {
            let dist = Normal::new(0.0, std).expect("positive std");
            Array2::from_shape_simple_fn((rows, cols), || dist.sample(self.rng))
        } else {
            Array2::zeros((rows, cols))
        };
        self.store.insert(name, value, group, true)
    }

    fn linear(&mut self, name: &str, inp: usize, out: usize) -> Linear {
        let std = self.std;
        let w = self.normal(&format!("{name}.w"), inp, out, std, ParamGroup::Pretrained);
        let b = self
            .store
            .insert(format!("{name}.b"), Array2::zeros((1, out)), ParamGroup::Pretrained, false);
        Linear { w, b }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        let gamma = self
            .store
            .insert(format!("{name}.gamma"), Array2::ones((1, d)), ParamGroup::Pretrained, false);
        let beta = self
            .store
            .insert(format!("{name}.beta"), Array2::zeros((1, d)), ParamGroup::Pretrained, false);
        Norm { gamma, beta }
    }

    fn attention(&mut self, name: &str, d: usize) -> AttentionBlock {
        AttentionBlock {
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.linear(&format!("{name}.k"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            o: self.linear(&format!("{name}.o"), d, d),
        }
    }

    fn ffn(&mut self, name: &str, d: usize, hidden: usize) -> Ffn {
        Ffn {
            up: self.linear(&format!("{name}.up"), d, hidden),
            down: self.linear(&format!("{name}.down"), hidden, d),
        }
    }
}

impl TinyTransformer {
    fn build(config: &ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let d = config.d_model;
        let mut init = Init {
            store,
            rng,
            std: config.init_std,
        };
        let std = config.init_std;
        // words plus [CLS], PAD, BOS, EOS; the two dialogue tags are new tokens
        let tokens = init.normal("embed.tokens", config.num_words() + 4, d, std, ParamGroup::Pretrained);
        let dialogue_tags = init.normal("embed.dialogue_tags", 2, d, std, ParamGroup::Raw);
        let enc_pos = init.normal("embed.enc_pos", config.max_positions, d, std, ParamGroup::Pretrained);
        let dec_pos = init.normal("embed.dec_pos", config.max_positions, d, std, ParamGroup::Pretrained);
        let encoder = (0..config.n_layers_enc)
            .map(|l| EncoderLayer {
                ln_attn: init.norm(&format!("enc.{l}.ln_attn"), d),
                attn: init.attention(&format!("enc.{l}.attn"), d),
                ln_ffn: init.norm(&format!("enc.{l}.ln_ffn"), d),
                ffn: init.ffn(&format!("enc.{l}.ffn"), d, config.ffn_dim),
            })
            .collect();
        let enc_norm = init.norm("enc.ln_out", d);
        let decoder = (0..config.n_layers_dec)
            .map(|l| DecoderLayer {
                ln_self: init.norm(&format!("dec.{l}.ln_self"), d),
                self_attn: init.attention(&format!("dec.{l}.self_attn"), d),
                ln_cross: init.norm(&format!("dec.{l}.ln_cross"), d),
                cross_attn: init.attention(&format!("dec.{l}.cross_attn"), d),
                ln_ffn: init.norm(&format!("dec.{l}.ln_ffn"), d),
                ffn: init.ffn(&format!("dec.{l}.ffn"), d, config.ffn_dim),
            })
            .collect();
        let dec_norm = init.norm("dec.ln_out", d);
        Self {
            config: config.clone(),
            tokens,
            dialogue_tags,
            enc_pos,
            dec_pos,
            encoder,
            enc_norm,
            decoder,
            dec_norm,
        }
    }

    fn embedding_table(&self, g: &mut Graph<'_>, rt: &mut Runtime) -> Var {
        if let Some(v) = rt.embeddings {
            return v;
        }
        let a = g.param(self.tokens);
        let b = g.param(self.dialogue_tags);
        let table = g.concat_rows(&[a, b]);
        rt.embeddings = Some(table);
        table
    }

    fn linear(g: &mut Graph<'_>, x: Var, l: Linear) -> Var {
        let w = g.param(l.w);
        let b = g.param(l.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    fn norm(g: &mut Graph<'_>, x: Var, n: Norm) -> Var {
        let gamma = g.param(n.gamma);
        let beta = g.param(n.beta);
        g.layer_norm(x, gamma, beta)
    }

    fn attend(g: &mut Graph<'_>, x: Var, memory: Var, block: &AttentionBlock, layout: AttentionLayout) -> Var {
        let q = Self::linear(g, x, block.q);
        let k = Self::linear(g, memory, block.k);
        let v = Self::linear(g, memory, block.v);
        let a = g.attention(q, k, v, layout);
        Self::linear(g, a, block.o)
    }

    fn feed_forward(g: &mut Graph<'_>, x: Var, ffn: &Ffn) -> Var {
        let h = Self::linear(g, x, ffn.up);
        let h = g.gelu(h);
        Self::linear(g, h, ffn.down)
    }

    fn check_ids(&self, ids: impl Iterator<Item = usize>) -> Result<(), ModelError> {
        for id in ids {
            if id >= self.config.vocab_size {
                return Err(ModelError::ShapeMismatch(format!(
                    "token id {id} outside vocabulary of {}",
                    self.config.vocab_size
                )));
            }
        }
        Ok(())
    }
}

impl Backbone for TinyTransformer {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn encode_pairs(
        &self,
        g: &mut Graph<'_>,
        input: &AssembledInput,
        rt: &mut Runtime,
    ) -> Result<Var, ModelError> {
        let (m, t) = (input.m, input.seq_len);
        if input.token_ids.dim() != (m, t) || input.attention_mask.dim() != (m, t) {
            return Err(ModelError::ShapeMismatch("assembled input dimensions disagree".into()));
        }
        if t > self.config.max_positions {
            return Err(ModelError::ShapeMismatch(format!(
                "sequence length {t} exceeds {} positions",
                self.config.max_positions
            )));
        }
        let ids = input.flat_ids();
        self.check_ids(ids.iter().copied())?;
        let table = self.embedding_table(g, rt);
        let tok = g.embedding(table, &ids);
        let pos_table = g.param(self.enc_pos);
        let positions: Vec<usize> = (0..m).flat_map(|_| 0..t).collect();
        let pos = g.embedding(pos_table, &positions);
        let mut x = g.add(tok, pos);
        x = rt.drop(g, x);
        let layout = AttentionLayout {
            heads: self.config.n_heads,
            groups: m,
            query_len: t,
            key_len: t,
            key_mask: input.flat_mask(),
            causal: false,
        };
        for layer in &self.encoder {
            let h = Self::norm(g, x, layer.ln_attn);
            let a = Self::attend(g, h, h, &layer.attn, layout.clone());
            let a = rt.drop(g, a);
            x = g.add(x, a);
            let h = Self::norm(g, x, layer.ln_ffn);
            let f = Self::feed_forward(g, h, &layer.ffn);
            let f = rt.drop(g, f);
            x = g.add(x, f);
        }
        Ok(Self::norm(g, x, self.enc_norm))
    }

    fn decode_logits(
        &self,
        g: &mut Graph<'_>,
        memory: Var,
        memory_mask: &[bool],
        decoder_input: &[u32],
        rt: &mut Runtime,
    ) -> Result<Var, ModelError> {
        let (t, d) = g.value(memory).dim();
        if d != self.config.d_model || memory_mask.len() != t {
            return Err(ModelError::ShapeMismatch(format!(
                "memory is {t}x{d} with {} mask entries, model width {}",
                memory_mask.len(),
                self.config.d_model
            )));
        }
        let s = decoder_input.len();
        if s == 0 || s > self.config.max_positions {
            return Err(ModelError::ShapeMismatch(format!("decoder input length {s}")));
        }
        self.check_ids(decoder_input.iter().map(|&i| i as usize))?;
        let table = self.embedding_table(g, rt);
        let ids: Vec<usize> = decoder_input.iter().map(|&i| i as usize).collect();
        let tok = g.embedding(table, &ids);
        let pos_table = g.param(self.dec_pos);
        let positions: Vec<usize> = (0..s).collect();
        let pos = g.embedding(pos_table, &positions);
        let mut y = g.add(tok, pos);
        y = rt.drop(g, y);
        let self_layout = AttentionLayout {
            heads: self.config.n_heads,
            groups: 1,
            query_len: s,
            key_len: s,
            key_mask: vec![true; s],
            causal: true,
        };
        let cross_layout = AttentionLayout {
            heads: self.config.n_heads,
            groups: 1,
            query_len: s,
            key_len: t,
            key_mask: memory_mask.to_vec(),
            causal: false,
        };
        for layer in &self.decoder {
            let h = Self::norm(g, y, layer.ln_self);
            let a = Self::attend(g, h, h, &layer.self_attn, self_layout.clone());
            let a = rt.drop(g, a);
            y = g.add(y, a);
            let h = Self::norm(g, y, layer.ln_cross);
            let c = Self::attend(g, h, memory, &layer.cross_attn, cross_layout.clone());
            let c = rt.drop(g, c);
            y = g.add(y, c);
            let h = Self::norm(g, y, layer.ln_ffn);
            let f = Self::feed_forward(g, h, &layer.ffn);
            let f = rt.drop(g, f);
            y = g.add(y, f);
        }
        let y = Self::norm(g, y, self.dec_norm);
        Ok(g.matmul_t(y, table))
    }
}

/// Decoder logits for every predicted target position.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderOutput {
    /// `S x vocab_size`.
    pub logits: Array2<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeStrategy {
    Greedy,
    Beam(usize),
}

impl Default for DecodeStrategy {
    fn default() -> Self {
        DecodeStrategy::Greedy
    }
}

impl FromStr for DecodeStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.to_ascii_lowercase();
        if s == "greedy" {
            return Ok(DecodeStrategy::Greedy);
        }
        s.strip_prefix("beam")
            .map(|k| k.trim_matches(|c| c == '(' || c == ')' || c == ':' || c == '='))
            .and_then(|k| k.parse().ok())
            .filter(|&k| k > 0)
            .map(DecodeStrategy::Beam)
            .ok_or_else(|| format!("unknown strategy {s:?} (greedy | beam(k))"))
    }
}

impl fmt::Display for DecodeStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecodeStrategy::Greedy => f.write_str("greedy"),
            DecodeStrategy::Beam(k) => write!(f, "beam({k})"),
        }
    }
}

/// Tape handles produced by one teacher-forced forward pass.
pub struct TurnForward {
    pub encoded: Var,
    pub fusion: FusionOutput,
    pub logits: Var,
}

/// Backbone plus fusion scorer, with all parameters in one store.
#[derive(Clone, Debug)]
pub struct KMineModel {
    pub params: ParamStore,
    backbone: TinyTransformer,
    scorer: Scorer,
}

impl KMineModel {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        if config.backbone == BackboneKind::PretrainedAdapter {
            return Err(ModelError::InvalidConfig(
                "pretrained_adapter needs externally supplied weights; load a checkpoint instead".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let backbone = TinyTransformer::build(config, &mut params, &mut rng);
        let mut init = Init {
            store: &mut params,
            rng: &mut rng,
            std: config.init_std,
        };
        let weight = init.normal(
            "fusion.scorer.w",
            2 * config.d_model,
            1,
            config.scorer_init_std,
            ParamGroup::Raw,
        );
        let bias = params.insert("fusion.scorer.b", Array2::zeros((1, 1)), ParamGroup::Raw, false);
        Ok(Self {
            params,
            backbone,
            scorer: Scorer { weight, bias },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        self.backbone.config()
    }

    pub fn backbone(&self) -> &dyn Backbone {
        &self.backbone
    }

    pub fn scorer(&self) -> Scorer {
        self.scorer
    }

    /// Teacher-forced forward pass of one turn onto `g`.
    pub fn forward_turn(
        &self,
        g: &mut Graph<'_>,
        input: &AssembledInput,
        target_ids: &[u32],
        mode: FusionMode,
        temperature: f64,
        rt: &mut Runtime,
    ) -> Result<TurnForward, ModelError> {
        if target_ids.len() < 2 {
            return Err(ModelError::ShapeMismatch("target needs BOS and one more token".into()));
        }
        let encoded = self.backbone.encode_pairs(g, input, rt)?;
        let fusion = fusion::fuse(g, encoded, input, self.scorer, mode, temperature)?;
        let logits = self.backbone.decode_logits(
            g,
            fusion.fused,
            &fusion.fused_mask,
            &target_ids[..target_ids.len() - 1],
            rt,
        )?;
        Ok(TurnForward {
            encoded,
            fusion,
            logits,
        })
    }

    /// Encoder states of the `m` rows, dropout disabled.
    pub fn encode_pairs(&self, input: &AssembledInput) -> Result<EncoderStates, ModelError> {
        let mut g = Graph::new(&self.params);
        let enc = self.backbone.encode_pairs(&mut g, input, &mut Runtime::eval())?;
        Ok(EncoderStates::from_packed(g.value(enc), input.attention_mask.clone()))
    }

    /// Scores, distribution and decoder memory for a turn, dropout disabled.
    pub fn select(
        &self,
        input: &AssembledInput,
        mode: FusionMode,
        temperature: f64,
    ) -> Result<(Vec<f64>, FusedState), ModelError> {
        let mut g = Graph::new(&self.params);
        let enc = self.backbone.encode_pairs(&mut g, input, &mut Runtime::eval())?;
        let out = fusion::fuse(&mut g, enc, input, self.scorer, mode, temperature)?;
        let alpha = g.value(out.alpha).iter().copied().collect();
        let fused = FusedState {
            states: g.value(out.fused).clone(),
            mask: out.fused_mask,
        };
        Ok((alpha, fused))
    }

    /// Logits predicting `target_ids[1..]` from `target_ids[..S-1]`.
    pub fn decode_logprobs(&self, fused: &FusedState, target_ids: &[u32]) -> Result<DecoderOutput, ModelError> {
        let bos = self.special(Special::Bos);
        if target_ids.len() < 2 || target_ids[0] != bos {
            return Err(ModelError::ShapeMismatch("target must start with BOS and hold 2+ ids".into()));
        }
        let mut g = Graph::new(&self.params);
        let memory = g.constant(fused.states.clone());
        let logits = self.backbone.decode_logits(
            &mut g,
            memory,
            &fused.mask,
            &target_ids[..target_ids.len() - 1],
            &mut Runtime::eval(),
        )?;
        Ok(DecoderOutput {
            logits: g.value(logits).clone(),
        })
    }

    pub fn special(&self, s: Special) -> u32 {
        (self.config().num_words() + Special::ALL.iter().position(|x| *x == s).expect("listed")) as u32
    }

    fn next_logits(&self, fused: &FusedState, prefix: &[u32]) -> Result<Vec<f64>, ModelError> {
        let mut g = Graph::new(&self.params);
        let memory = g.constant(fused.states.clone());
        let logits = self
            .backbone
            .decode_logits(&mut g, memory, &fused.mask, prefix, &mut Runtime::eval())?;
        let v = g.value(logits);
        Ok(v.row(v.nrows() - 1).to_vec())
    }

    /// Generates up to `max_len` tokens after BOS, stopping at EOS (which is kept).
    pub fn generate(
        &self,
        fused: &FusedState,
        max_len: usize,
        strategy: DecodeStrategy,
    ) -> Result<Vec<u32>, ModelError> {
        let max_len = max_len.min(self.config().max_positions.saturating_sub(1)).max(1);
        let bos = self.special(Special::Bos);
        let eos = self.special(Special::Eos);
        match strategy {
            DecodeStrategy::Greedy => {
                let mut seq = vec![bos];
                while seq.len() <= max_len {
                    let logits = self.next_logits(fused, &seq)?;
                    let next = fusion::argmax(&logits) as u32;
                    seq.push(next);
                    if next == eos {
                        break;
                    }
                }
                Ok(seq[1..].to_vec())
            }
            DecodeStrategy::Beam(k) => self.beam_search(fused, max_len, k.max(1), bos, eos),
        }
    }

    fn beam_search(
        &self,
        fused: &FusedState,
        max_len: usize,
        k: usize,
        bos: u32,
        eos: u32,
    ) -> Result<Vec<u32>, ModelError> {
        let mut alive: Vec<(Vec<u32>, f64)> = vec![(vec![bos], 0.0)];
        let mut finished: Vec<(Vec<u32>, f64)> = Vec::new();
        for _ in 0..max_len {
            let mut candidates: Vec<(usize, u32, f64)> = Vec::new();
            for (b, (seq, score)) in alive.iter().enumerate() {
                let logits = self.next_logits(fused, seq)?;
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                for (tok, &l) in logits.iter().enumerate() {
                    candidates.push((b, tok as u32, score + l - lse));
                }
            }
            // stable sort keeps (beam, token) order among equal scores
            candidates.sort_by(|a, b| b.2.total_cmp(&a.2));
            let mut next = Vec::with_capacity(k);
            for (b, tok, score) in candidates.into_iter().take(k) {
                let mut seq = alive[b].0.clone();
                seq.push(tok);
                if tok == eos {
                    finished.push((seq, score));
                } else {
                    next.push((seq, score));
                }
            }
            alive = next;
            if alive.is_empty() {
                break;
            }
        }
        let best = finished
            .into_iter()
            .chain(alive)
            .reduce(|best, c| if c.1 > best.1 { c } else { best })
            .expect("at least one hypothesis");
        Ok(best.0[1..].to_vec())
    }
}

/// Per-row log-softmax, used when scoring token probabilities outside the tape.
pub fn log_softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|x| x - lse);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{DialogueTurn, Utterance};
    use crate::encoding::{assemble, encode_target, TextEncoder, Tokenizer};

    fn setup() -> (Tokenizer, KMineModel) {
        let words: Vec<String> = "a b c d e hi there x y".split_whitespace().map(String::from).collect();
        let tok = Tokenizer::new(words).unwrap();
        let config = ModelConfig {
            d_model: 16,
            n_heads: 2,
            ffn_dim: 32,
            dropout: 0.0,
            ..ModelConfig::tiny(tok.vocab_size())
        };
        (tok, KMineModel::new(&config, 3).unwrap())
    }

    fn input(tok: &Tokenizer, pool: &[&str]) -> AssembledInput {
        let turn = DialogueTurn::new(
            vec![Utterance::user("hi there")],
            pool.iter().map(|s| s.to_string()).collect(),
            Some(0),
            "x y",
        )
        .unwrap();
        assemble(&turn, tok, 3, 3, 32).unwrap()
    }

    #[test]
    fn encoder_shapes_and_identical_rows() {
        let (tok, model) = setup();
        let inp = input(&tok, &["a b", "c d e", "a b"]);
        let enc = model.encode_pairs(&inp).unwrap();
        assert_eq!(enc.states.dim(), (3, inp.seq_len, 16));
        assert_eq!(fusion::row_states(&enc, 0), fusion::row_states(&enc, 2));
        assert_ne!(fusion::row_states(&enc, 0), fusion::row_states(&enc, 1));
        assert!(enc.states.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn encoding_is_permutation_equivariant() {
        let (tok, model) = setup();
        let a = model.encode_pairs(&input(&tok, &["a b", "c d e", "x"])).unwrap();
        let b = model.encode_pairs(&input(&tok, &["x", "a b", "c d e"])).unwrap();
        for (i, j) in [(0, 1), (1, 2), (2, 0)] {
            let diff = &fusion::row_states(&a, i) - &fusion::row_states(&b, j);
            assert!(diff.iter().all(|x| x.abs() < 1e-12));
        }
    }

    #[test]
    fn decoder_shapes_and_sensitivity() {
        let (tok, model) = setup();
        let bos = tok.special(Special::Bos);
        let eos = tok.special(Special::Eos);
        let (_, fused) = model.select(&input(&tok, &["a b", "c"]), FusionMode::Fused, 1.0).unwrap();
        let out = model.decode_logprobs(&fused, &[bos, eos]).unwrap();
        assert_eq!(out.logits.dim(), (1, tok.vocab_size()));

        let target = encode_target("x y", &tok, 16).unwrap();
        let a = model.decode_logprobs(&fused, &target).unwrap();
        let zero = FusedState {
            states: Array2::zeros(fused.states.raw_dim()),
            mask: fused.mask.clone(),
        };
        let b = model.decode_logprobs(&zero, &target).unwrap();
        assert_ne!(a.logits, b.logits);
        assert!(b.logits.iter().all(|x| x.is_finite()));
        assert!(model.decode_logprobs(&fused, &[eos, bos]).is_err());
    }

    #[test]
    fn rejects_bad_ids_and_configs() {
        let (tok, model) = setup();
        let mut inp = input(&tok, &["a"]);
        inp.token_ids[[0, 0]] = 999;
        assert!(matches!(model.encode_pairs(&inp), Err(ModelError::ShapeMismatch(_))));
        let bad = ModelConfig {
            d_model: 10,
            n_heads: 4,
            ..ModelConfig::tiny(20)
        };
        assert!(KMineModel::new(&bad, 0).is_err());
        let bad = ModelConfig {
            dropout: 1.0,
            ..ModelConfig::tiny(20)
        };
        assert!(KMineModel::new(&bad, 0).is_err());
        let adapter = ModelConfig {
            backbone: BackboneKind::PretrainedAdapter,
            ..ModelConfig::tiny(20)
        };
        assert!(KMineModel::new(&adapter, 0).is_err());
    }

    #[test]
    fn forced_argmax_generation() {
        let (tok, mut model) = setup();
        let x = tok.encode("x").unwrap()[0];
        // the output projection is tied to the embeddings: make "x" dominate by
        // aligning every final-norm output with its embedding row
        let d = model.config().d_model;
        let table = model.params.id("embed.tokens").unwrap();
        model.params.get_mut(table).row_mut(x as usize).fill(0.0);
        model.params.get_mut(table).row_mut(x as usize)[0] = 50.0;
        let beta = model.params.id("dec.ln_out.beta").unwrap();
        let gamma = model.params.id("dec.ln_out.gamma").unwrap();
        model.params.get_mut(gamma).fill(0.0);
        let mut shift = Array2::zeros((1, d));
        shift[[0, 0]] = 1.0;
        *model.params.get_mut(beta) = shift;
        let (_, fused) = model.select(&input(&tok, &["a", "b"]), FusionMode::Fused, 1.0).unwrap();
        let out = model.generate(&fused, 5, DecodeStrategy::Greedy).unwrap();
        assert_eq!(out, vec![x; 5]);
        assert_eq!(model.generate(&fused, 1, DecodeStrategy::Greedy).unwrap(), vec![x]);
    }

    #[test]
    fn beam_of_one_matches_greedy() {
        let (tok, model) = setup();
        let (_, fused) = model.select(&input(&tok, &["a b", "c"]), FusionMode::Fused, 1.0).unwrap();
        let greedy = model.generate(&fused, 6, DecodeStrategy::Greedy).unwrap();
        let beam = model.generate(&fused, 6, DecodeStrategy::Beam(1)).unwrap();
        assert_eq!(greedy, beam);
        let wide = model.generate(&fused, 6, DecodeStrategy::Beam(3)).unwrap();
        assert!(!wide.is_empty() && wide.len() <= 6);
        assert_eq!("beam(4)".parse::<DecodeStrategy>().unwrap(), DecodeStrategy::Beam(4));
    }

    #[test]
    fn dropout_only_in_training_runtime() {
        let (tok, model) = setup();
        let inp = input(&tok, &["a b", "c"]);
        let mut g = Graph::new(&model.params);
        let e1 = model.backbone().encode_pairs(&mut g, &inp, &mut Runtime::eval()).unwrap();
        let e2 = model.backbone().encode_pairs(&mut g, &inp, &mut Runtime::train(0.0, 1)).unwrap();
        let e3 = model.backbone().encode_pairs(&mut g, &inp, &mut Runtime::train(0.5, 1)).unwrap();
        assert_eq!(g.value(e1), g.value(e2));
        assert_ne!(g.value(e1), g.value(e3));
    }
}
