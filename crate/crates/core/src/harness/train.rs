use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{deterministic_mode, Checkpoint, HarnessError, LocTrace, TrainConfig};
use crate::autograd::{Graph, ParamGrads};
use crate::corpus::{Dataset, Setting};
use crate::encoding::{assemble, encode_response, AssembledInput, Special, TextEncoder, Tokenizer};
use crate::metrics::localization;
use crate::model::{KMineModel, Runtime};
use crate::objectives::{combined_var, nll_var, selection_var};
use crate::optim::{linear_decay, AdamW, AdamWState, GroupRates};

/// A turn encoded once, up front.
#[derive(Clone, Debug)]
struct Prepared {
    input: AssembledInput,
    target: Vec<u32>,
    gold: Option<usize>,
}

/// Summary of one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    /// Mean of per-turn totals over the effective batch.
    pub loss: f64,
    pub mean_l_rg: f64,
    pub mean_loc: f64,
    pub rates: (f64, f64),
    pub grad_norm: f64,
}

struct TurnResult {
    grads: ParamGrads,
    total: f64,
    l_rg: f64,
    l_ks: Option<f64>,
    /// `None` for single-option pools, where Loc is undefined.
    loc: Option<f64>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Dropout seed of the turn at `position` in the batch of `step`. It does not
/// depend on how the batch is split into micro-batches.
pub fn dropout_seed(seed: u64, step: usize, position: usize) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ step as u64) ^ position as u64)
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ 0x5EED_0F_DA7A) ^ epoch as u64);
    order.shuffle(&mut rng);
    order
}

/// Dataset indices of the batch at `step`: consecutive slices of a stream of
/// per-epoch shuffles, so the order is a pure function of `(seed, step)`.
pub fn batch_indices(seed: u64, step: usize, batch: usize, n: usize) -> Vec<usize> {
    assert!(n > 0, "empty dataset");
    let start = step * batch;
    let mut out = Vec::with_capacity(batch);
    let mut cached: Option<(usize, Vec<usize>)> = None;
    for p in start..start + batch {
        let epoch = p / n;
        if cached.as_ref().is_none_or(|c| c.0 != epoch) {
            cached = Some((epoch, epoch_order(seed, epoch, n)));
        }
        out.push(cached.as_ref().expect("filled").1[p % n]);
    }
    out
}

/// Stateful trainer. Data order and dropout are functions of the seed and step,
/// so a run resumed from a checkpoint continues exactly where it stopped.
pub struct Trainer {
    config: TrainConfig,
    tokenizer: Tokenizer,
    model: KMineModel,
    optimizer: AdamW,
    state: AdamWState,
    step: usize,
    trace: LocTrace,
    data: Vec<Prepared>,
    deterministic: bool,
}

fn check_nonempty(config: &TrainConfig, dataset: &Dataset) -> Result<(), HarnessError> {
    if dataset.turns.iter().any(|t| config.setting == Setting::All || t.uses_knowledge) {
        Ok(())
    } else {
        Err(HarnessError::EmptyDataset)
    }
}

impl Trainer {
    /// Fresh run; the vocabulary comes from `config.vocab` or the dataset.
    pub fn new(config: TrainConfig, dataset: &Dataset) -> Result<Self, HarnessError> {
        check_nonempty(&config, dataset)?;
        let tokenizer = match &config.vocab {
            Some(path) => Tokenizer::read_vocab(path)?,
            None => Tokenizer::from_turns(&dataset.turns),
        };
        Self::with_tokenizer(config, dataset, tokenizer)
    }

    pub fn with_tokenizer(mut config: TrainConfig, dataset: &Dataset, tokenizer: Tokenizer) -> Result<Self, HarnessError> {
        check_nonempty(&config, dataset)?;
        let v = tokenizer.vocab_size();
        if config.model.vocab_size == 0 {
            config.model.vocab_size = v;
        } else if config.model.vocab_size != v {
            return Err(HarnessError::VocabMismatch {
                vocab: v,
                model: config.model.vocab_size,
            });
        }
        let model = KMineModel::new(&config.model, config.seed)?;
        let state = AdamWState::new(&model.params);
        Self::assemble_run(config, dataset, tokenizer, model, state, 0, LocTrace::new())
    }

    /// Continues the run stored in `checkpoint` on the same dataset.
    pub fn resume(checkpoint: &Checkpoint, dataset: &Dataset) -> Result<Self, HarnessError> {
        let model = checkpoint.model()?;
        if checkpoint.optimizer.updates.len() != model.params.len() {
            return Err(HarnessError::BadCheckpoint("optimizer state does not match the model".into()));
        }
        Self::assemble_run(
            checkpoint.config.clone(),
            dataset,
            checkpoint.tokenizer()?,
            model,
            checkpoint.optimizer.clone(),
            checkpoint.step,
            checkpoint.trace.clone(),
        )
    }

    fn assemble_run(
        config: TrainConfig,
        dataset: &Dataset,
        tokenizer: Tokenizer,
        model: KMineModel,
        state: AdamWState,
        step: usize,
        trace: LocTrace,
    ) -> Result<Self, HarnessError> {
        config.validate()?;
        let dataset = dataset.clone().with_setting(config.setting);
        if dataset.is_empty() {
            return Err(HarnessError::EmptyDataset);
        }
        if config.lambda > 0.0 && dataset.turns.iter().all(|t| t.gold_index.is_none()) {
            return Err(HarnessError::LambdaPositiveButNoGold);
        }
        let data = dataset
            .turns
            .iter()
            .map(|t| {
                Ok(Prepared {
                    input: assemble(t, &tokenizer, config.k_len, config.history_window, config.max_len)?,
                    target: encode_response(t, &tokenizer, config.max_resp_len)?,
                    gold: t.gold_index,
                })
            })
            .collect::<Result<Vec<_>, HarnessError>>()?;
        let optimizer = AdamW {
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
            weight_decay: config.weight_decay,
        };
        Ok(Self {
            config,
            tokenizer,
            model,
            optimizer,
            state,
            step,
            trace,
            data,
            deterministic: deterministic_mode(),
        })
    }

    /// Forces sequential execution regardless of the environment.
    pub fn set_deterministic(&mut self, on: bool) {
        self.deterministic = on;
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &KMineModel {
        &self.model
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn trace(&self) -> &LocTrace {
        &self.trace
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.max_steps
    }

    /// Learning rates applied at `step`.
    pub fn rates_at(&self, step: usize) -> GroupRates {
        GroupRates {
            pretrained: linear_decay(self.config.lr_pretrained, step, self.config.max_steps),
            raw: linear_decay(self.config.lr_raw, step, self.config.max_steps),
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(
            self.step,
            &self.config,
            &self.tokenizer,
            &self.model,
            &self.state,
            &self.trace,
        )
    }

    fn turn(&self, index: usize, position: usize) -> Result<TurnResult, HarnessError> {
        let cfg = &self.config;
        let p = &self.data[index];
        let pad = self.tokenizer.special(Special::Pad);
        let mut g = Graph::new(&self.model.params);
        let mut rt = Runtime::train(cfg.model.dropout, dropout_seed(cfg.seed, self.step, position));
        let fwd = self
            .model
            .forward_turn(&mut g, &p.input, &p.target, cfg.mode, cfg.temperature, &mut rt)?;
        let (l_rg, _) = nll_var(&mut g, fwd.logits, &p.target, pad)?;
        let l_ks = match p.gold {
            Some(gold) if cfg.lambda > 0.0 => Some(selection_var(&mut g, fwd.fusion.alpha, gold, cfg.selection_loss)?),
            _ => None,
        };
        let total = combined_var(&mut g, l_rg, l_ks, cfg.lambda)?;
        let alpha: Vec<f64> = g.value(fwd.fusion.alpha).iter().copied().collect();
        let grads = g.backward(total).param_grads(&g, &self.model.params);
        Ok(TurnResult {
            grads,
            total: g.scalar(total),
            l_rg: g.scalar(l_rg),
            l_ks: l_ks.map(|v| g.scalar(v)),
            loc: localization(&alpha).ok(),
        })
    }

    fn run_chunk(&self, batch: &[usize], offset: usize) -> Vec<Result<TurnResult, HarnessError>> {
        let work = |j: usize| self.turn(batch[j], offset + j);
        if self.deterministic {
            (0..batch.len()).map(work).collect()
        } else {
            (0..batch.len()).into_par_iter().map(work).collect()
        }
    }

    /// One optimizer step over `effective_batch` turns, accumulated over
    /// micro-batches. Per-turn gradients are summed in batch order whatever the
    /// micro-batch size.
    pub fn step_once(&mut self) -> Result<StepRecord, HarnessError> {
        let cfg = &self.config;
        let batch = batch_indices(cfg.seed, self.step, cfg.effective_batch, self.data.len());
        let scale = 1.0 / cfg.effective_batch as f64;
        let mut grads = ParamGrads::zeros_like(&self.model.params);
        let (mut loss, mut l_rg, mut loc, mut loc_n) = (0.0, 0.0, 0.0, 0usize);
        let mut per_turn = Vec::with_capacity(batch.len());
        for (c, chunk) in batch.chunks(cfg.micro_batch).enumerate() {
            for r in self.run_chunk(chunk, c * cfg.micro_batch) {
                let r = r?;
                grads.merge(&r.grads, scale);
                loss += r.total;
                l_rg += r.l_rg;
                if let Some(l) = r.loc {
                    loc += l;
                    loc_n += 1;
                }
                per_turn.push((r.total, r.l_rg, r.l_ks, r.loc));
            }
        }
        loss *= scale;
        let grad_norm = grads.global_norm();
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(HarnessError::NonFiniteLoss {
                step: self.step,
                dump: self.dump(&batch, &per_turn, grad_norm),
            });
        }
        let rates = self.rates_at(self.step);
        self.optimizer.step(&mut self.model.params, &grads, &mut self.state, rates);
        let mean_loc = if loc_n == 0 { 0.0 } else { (loc / loc_n as f64).clamp(0.0, 1.0) };
        self.trace.push(self.step, mean_loc)?;
        let record = StepRecord {
            step: self.step,
            loss,
            mean_l_rg: l_rg * scale,
            mean_loc,
            rates: (rates.pretrained, rates.raw),
            grad_norm,
        };
        log::debug!(
            "step {} loss {:.4} loc {:.4} |g| {:.3e}",
            record.step,
            record.loss,
            record.mean_loc,
            record.grad_norm
        );
        self.step += 1;
        Ok(record)
    }

    fn dump(&self, batch: &[usize], per_turn: &[(f64, f64, Option<f64>, Option<f64>)], grad_norm: f64) -> String {
        let mut s = format!("grad_norm={grad_norm}; turns:");
        for (&i, (total, rg, ks, loc)) in batch.iter().zip(per_turn) {
            let _ = write!(
                s,
                " [#{i} m={} gold={:?} total={total} l_rg={rg} l_ks={ks:?} loc={loc:?}]",
                self.data[i].input.m, self.data[i].gold
            );
        }
        s
    }

    /// Trains to `max_steps`, handing interval checkpoints to `on_checkpoint`.
    pub fn run<F>(&mut self, mut on_checkpoint: F) -> Result<(), HarnessError>
    where
        F: FnMut(&Checkpoint) -> Result<(), HarnessError>,
    {
        let every = self.config.checkpoint_every;
        while !self.is_done() {
            let rec = self.step_once()?;
            if rec.step % 100 == 0 {
                log::info!("step {} loss {:.4} loc {:.4}", rec.step, rec.loss, rec.mean_loc);
            }
            if every > 0 && self.step % every == 0 && !self.is_done() {
                on_checkpoint(&self.checkpoint())?;
            }
        }
        Ok(())
    }

    /// Runs until `step` (capped at `max_steps`).
    pub fn run_until(&mut self, step: usize) -> Result<(), HarnessError> {
        while self.step < step.min(self.config.max_steps) {
            self.step_once()?;
        }
        Ok(())
    }
}

/// Trains from scratch and returns the final checkpoint with its Loc trace.
pub fn train(config: TrainConfig, dataset: &Dataset) -> Result<(Checkpoint, LocTrace), HarnessError> {
    let mut t = Trainer::new(config, dataset)?;
    t.run(|_| Ok(()))?;
    let ck = t.checkpoint();
    let trace = ck.trace.clone();
    Ok((ck, trace))
}
