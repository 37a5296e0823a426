//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits non-zero
//! if any criterion fails.
//!
//! Criteria 5 to 7 train nine small models on the synthetic task. Set
//! `KMINE_ACCEPTANCE_QUICK=1` to skip them while iterating.

use std::path::PathBuf;
use std::time::Instant;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kmine::autograd::{Graph, Var};
use kmine::corpus::{
    generate_synthetic, split_dataset, Dataset, DialogueTurn, Setting, Split, SyntheticSpec, Utterance,
};
use kmine::encoding::{assemble, encode_response, AssembledInput, Special, TextEncoder, Tokenizer};
use kmine::fusion::{self, EncoderStates, FusionMode, KnowledgeDistribution, RelevanceScores};
use kmine::harness::{evaluate_model, plot_loc, synthetic_config, Checkpoint, EvalOptions, LocTrace, TrainConfig, Trainer};
use kmine::metrics::{localization, perplexity, rouge, unigram_f1, RougeMode};
use kmine::model::{KMineModel, ModelConfig, Runtime};
use kmine::objectives::{combined_var, nll_var, selection_var, SelectionLoss};
use kmine::optim::linear_decay;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------------------
// 1. metric exactness

fn metric_exactness() -> Outcome {
    let tol = 1e-6;
    let checks = [
        ("F1", unigram_f1("the cat sat", "the cat"), 0.8),
        ("ROUGE-L", rouge("a b c d", "a c d", RougeMode::RL), 6.0 / 7.0),
        ("PPL", perplexity(2.0 * 5.0, 5).unwrap(), 2f64.exp()),
        ("Loc(u)", localization(&[0.25; 4]).unwrap(), 0.0),
        ("Loc(1hot)", localization(&[0.0, 1.0, 0.0, 0.0]).unwrap(), 1.0),
        ("Loc(.5,.5)", localization(&[0.5, 0.5, 0.0, 0.0]).unwrap(), 2.0 - 2f64.sqrt()),
    ];
    let worst = checks.iter().map(|(_, got, want)| (got - want).abs()).fold(0.0, f64::max);
    let detail = checks
        .iter()
        .map(|(n, got, _)| format!("{n}={got:.6}"))
        .collect::<Vec<_>>()
        .join(" ");
    outcome(worst <= tol, format!("{detail}; max error {worst:.1e} (tol {tol:.0e})"))
}

// ---------------------------------------------------------------------------
// shared d_model=8, T=6, m=3 instance

struct Instance {
    model: KMineModel,
    tok: Tokenizer,
    turn: DialogueTurn,
    input: AssembledInput,
    target: Vec<u32>,
    gold: usize,
}

fn instance_config(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_layers_enc: 1,
        n_layers_dec: 1,
        n_heads: 2,
        ffn_dim: 16,
        vocab_size,
        dropout: 0.0,
        max_positions: 8,
        init_std: 0.3,
        scorer_init_std: 0.3,
        ..ModelConfig::default()
    }
}

fn instance() -> Instance {
    let words: Vec<String> = "a b c d e f g h".split(' ').map(String::from).collect();
    let tok = Tokenizer::new(words).unwrap();
    let turn = DialogueTurn::new(
        vec![Utterance::user("a b")],
        vec!["c d".into(), "e f".into(), "g h".into()],
        Some(1),
        "e f",
    )
    .unwrap();
    let input = assemble(&turn, &tok, 2, 1, 6).unwrap();
    assert_eq!((input.m, input.seq_len), (3, 6));
    let target = encode_response(&turn, &tok, 8).unwrap();
    let model = KMineModel::new(&instance_config(tok.vocab_size()), 11).unwrap();
    Instance {
        model,
        tok,
        turn,
        input,
        target,
        gold: 1,
    }
}

struct Built {
    total: Var,
    l_ks: Var,
    fused: Var,
    enc: Var,
}

/// Encoder, fusion, decoder and loss mixture on one tape. `enc_override`
/// replaces the encoder output with a tracked input.
fn build(
    g: &mut Graph<'_>,
    model: &KMineModel,
    inst: &Instance,
    enc_override: Option<&Array2<f64>>,
    mode: FusionMode,
    lambda: f64,
) -> Built {
    let mut rt = Runtime::eval();
    let enc = match enc_override {
        Some(h) => g.input(h.clone()),
        None => model.backbone().encode_pairs(g, &inst.input, &mut rt).unwrap(),
    };
    let out = fusion::fuse(g, enc, &inst.input, model.scorer(), mode, 1.0).unwrap();
    let s = inst.target.len();
    let logits = model
        .backbone()
        .decode_logits(g, out.fused, &out.fused_mask, &inst.target[..s - 1], &mut rt)
        .unwrap();
    let (l_rg, _) = nll_var(g, logits, &inst.target, model.special(Special::Pad)).unwrap();
    let l_ks = selection_var(g, out.alpha, inst.gold, SelectionLoss::Bce).unwrap();
    let total = combined_var(g, l_rg, Some(l_ks), lambda).unwrap();
    Built {
        total,
        l_ks,
        fused: out.fused,
        enc,
    }
}

fn loss_with(model: &KMineModel, inst: &Instance, enc: Option<&Array2<f64>>, lambda: f64) -> f64 {
    let mut g = Graph::new(&model.params);
    let b = build(&mut g, model, inst, enc, FusionMode::Fused, lambda);
    g.scalar(b.total)
}

/// Loss and its gradient as a function of the decoder memory alone; the
/// selection term is a constant with respect to it.
fn loss_from_fused(inst: &Instance, fused: &Array2<f64>, mask: &[bool], l_ks: f64, lambda: f64) -> (f64, Array2<f64>) {
    let model = &inst.model;
    let mut g = Graph::new(&model.params);
    let f = g.input(fused.clone());
    let s = inst.target.len();
    let logits = model
        .backbone()
        .decode_logits(&mut g, f, mask, &inst.target[..s - 1], &mut Runtime::eval())
        .unwrap();
    let (l_rg, _) = nll_var(&mut g, logits, &inst.target, model.special(Special::Pad)).unwrap();
    let ks = g.constant(Array2::from_elem((1, 1), l_ks));
    let total = combined_var(&mut g, l_rg, Some(ks), lambda).unwrap();
    let grad = g.backward(total).wrt(f).cloned().unwrap();
    (g.scalar(total), grad)
}

fn norm(a: &Array2<f64>) -> f64 {
    a.mapv(|x| x * x).sum().sqrt()
}

fn rel_err(a: &Array2<f64>, n: &Array2<f64>) -> f64 {
    let scale = norm(a).max(norm(n));
    let diff = norm(&(a - n));
    if scale < 1e-9 {
        diff
    } else {
        diff / scale
    }
}

fn central_diff(x: &Array2<f64>, h: f64, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
    let mut out = Array2::zeros(x.raw_dim());
    for (idx, slot) in out.iter_mut().enumerate() {
        let mut plus = x.clone();
        let mut minus = x.clone();
        *plus.iter_mut().nth(idx).unwrap() += h;
        *minus.iter_mut().nth(idx).unwrap() -= h;
        *slot = (f(&plus) - f(&minus)) / (2.0 * h);
    }
    out
}

// ---------------------------------------------------------------------------
// 2. gradient checks

fn gradient_checks() -> Outcome {
    let inst = instance();
    let h = 1e-5;
    let w_id = inst.model.scorer().weight;
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for lambda in [0.0, 0.5, 1.0] {
        let mut g = Graph::new(&inst.model.params);
        let b = build(&mut g, &inst.model, &inst, None, FusionMode::Fused, lambda);
        let grads = g.backward(b.total);

        let w0 = inst.model.params.get(w_id);
        let analytic_w = grads
            .param_grads(&g, &inst.model.params)
            .get(w_id)
            .cloned()
            .unwrap_or_else(|| Array2::zeros(w0.raw_dim()));
        let numeric_w = central_diff(w0, h, |w| {
            let mut probe = inst.model.clone();
            probe.params.get_mut(w_id).assign(w);
            loss_with(&probe, &inst, None, lambda)
        });
        let e_w = rel_err(&analytic_w, &numeric_w);

        let fused_val = g.value(b.fused).clone();
        let mask: Vec<bool> = (0..inst.input.seq_len)
            .map(|j| inst.input.attention_mask.column(j).iter().any(|&x| x != 0))
            .collect();
        let l_ks = g.scalar(b.l_ks);
        let (_, analytic_f) = loss_from_fused(&inst, &fused_val, &mask, l_ks, lambda);
        let numeric_f = central_diff(&fused_val, h, |f| loss_from_fused(&inst, f, &mask, l_ks, lambda).0);
        let e_f = rel_err(&analytic_f, &numeric_f);

        let enc_val = g.value(b.enc).clone();
        let mut ge = Graph::new(&inst.model.params);
        let be = build(&mut ge, &inst.model, &inst, Some(&enc_val), FusionMode::Fused, lambda);
        let analytic_h = ge.backward(be.total).wrt(be.enc).cloned().unwrap();
        let numeric_h = central_diff(&enc_val, h, |x| loss_with(&inst.model, &inst, Some(x), lambda));
        let e_h = rel_err(&analytic_h, &numeric_h);

        worst = worst.max(e_w).max(e_f).max(e_h);
        parts.push(format!("λ={lambda}: W {e_w:.1e}, fused {e_f:.1e}, enc {e_h:.1e}"));
    }
    outcome(worst < 1e-4, format!("{} (relative error tol 1e-4)", parts.join("; ")))
}

// ---------------------------------------------------------------------------
// 3. gradient-flow ablation

fn scorer_grad_norm(inst: &Instance, mode: FusionMode) -> (f64, bool) {
    let mut g = Graph::new(&inst.model.params);
    let b = build(&mut g, &inst.model, inst, None, mode, 0.0);
    let grads = g.backward(b.total).param_grads(&g, &inst.model.params);
    match grads.get(inst.model.scorer().weight) {
        None => (0.0, true),
        Some(gw) => {
            let norm = gw.mapv(|x| x * x).sum().sqrt();
            (norm, gw.iter().all(|&x| x == 0.0))
        }
    }
}

fn gradient_flow() -> Outcome {
    let inst = instance();
    let (max_norm, max_exact_zero) = scorer_grad_norm(&inst, FusionMode::Max);
    let (fused_norm, _) = scorer_grad_norm(&inst, FusionMode::Fused);

    let data = Dataset::new(vec![inst.turn.clone()], Split::Train, Setting::All);
    let cfg = TrainConfig {
        mode: FusionMode::Mean,
        effective_batch: 1,
        micro_batch: 1,
        max_steps: 3,
        lr_pretrained: 1e-2,
        lr_raw: 1e-2,
        k_len: 2,
        history_window: 1,
        max_len: 6,
        max_resp_len: 8,
        model: instance_config(0),
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::with_tokenizer(cfg, &data, inst.tok.clone()).unwrap();
    let scorer = trainer.model().scorer();
    let before = (
        trainer.model().params.get(scorer.weight).clone(),
        trainer.model().params.get(scorer.bias).clone(),
    );
    let emb = trainer.model().params.id("embed.tokens").unwrap();
    let emb_before = trainer.model().params.get(emb).clone();
    trainer.run_until(3).unwrap();
    let p = &trainer.model().params;
    let bitwise = |a: &Array2<f64>, b: &Array2<f64>| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
    let scorer_same = bitwise(&before.0, p.get(scorer.weight)) && bitwise(&before.1, p.get(scorer.bias));
    let backbone_moved = !bitwise(&emb_before, p.get(emb));
    outcome(
        max_exact_zero && fused_norm > 1e-8 && scorer_same && backbone_moved,
        format!(
            "max ‖∂L_RG/∂W‖={max_norm:e} (exact zero: {max_exact_zero}); fused ‖∂L_RG/∂W‖={fused_norm:.3e}; \
             mean-mode scorer bitwise unchanged after 3 steps: {scorer_same} (backbone moved: {backbone_moved})"
        ),
    )
}

// ---------------------------------------------------------------------------
// 4. aggregation equivalences

fn random_states(rng: &mut ChaCha8Rng, m: usize, t: usize, d: usize) -> EncoderStates {
    let states = Array3::from_shape_simple_fn((m, t, d), || rng.random_range(-3.0..3.0));
    let mask = Array2::from_shape_simple_fn((m, t), || u8::from(rng.random_bool(0.8)));
    EncoderStates { states, mask }
}

fn aggregation_equivalences() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut onehot_err, mut uniform_err, mut violations) = (0f64, 0f64, 0usize);
    for _ in 0..200 {
        let m = rng.random_range(2..7);
        let (t, d) = (rng.random_range(1..9), rng.random_range(1..9));
        let enc = random_states(&mut rng, m, t, d);
        let i = rng.random_range(0..m);
        let fused = fusion::aggregate(&enc, &KnowledgeDistribution::one_hot(m, i), FusionMode::Fused).unwrap();
        let max = fusion::aggregate(&enc, &KnowledgeDistribution::one_hot(m, i), FusionMode::Max).unwrap();
        onehot_err = onehot_err.max((&fused.states - &max.states).mapv(f64::abs).fold(0.0, |a, &b| a.max(b)));
        let fu = fusion::aggregate(&enc, &KnowledgeDistribution::uniform(m), FusionMode::Fused).unwrap();
        let mean = fusion::aggregate(&enc, &KnowledgeDistribution::uniform(m), FusionMode::Mean).unwrap();
        uniform_err = uniform_err.max((&fu.states - &mean.states).mapv(f64::abs).fold(0.0, |a, &b| a.max(b)));
    }
    for _ in 0..1000 {
        let m = rng.random_range(2..9);
        let (t, d) = (rng.random_range(1..7), rng.random_range(1..7));
        let enc = random_states(&mut rng, m, t, d);
        let raw = RelevanceScores((0..m).map(|_| rng.random_range(-5.0..5.0)).collect());
        let alpha = fusion::normalize(&raw, rng.random_range(0.2..3.0));
        let out = fusion::aggregate(&enc, &alpha, FusionMode::Fused).unwrap();
        for j in 0..t {
            for k in 0..d {
                let col = enc.states.slice(ndarray::s![.., j, k]);
                let lo = col.fold(f64::INFINITY, |a, &b| a.min(b));
                let hi = col.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let v = out.states[[j, k]];
                if v < lo - 1e-12 || v > hi + 1e-12 {
                    violations += 1;
                }
            }
        }
    }
    outcome(
        onehot_err <= 1e-12 && uniform_err <= 1e-12 && violations == 0,
        format!(
            "one-hot fused vs max max|Δ|={onehot_err:.1e}; uniform fused vs mean max|Δ|={uniform_err:.1e} (tol 1e-12); \
             convex-bound violations {violations} over 1000 instances"
        ),
    )
}

// ---------------------------------------------------------------------------
// 5-7. synthetic runs

const SEEDS: [u64; 3] = [1, 2, 3];
const MAX_STEPS: usize = 2000;
const BATCH: usize = 32;

struct Run {
    r_at_1: f64,
    trace: LocTrace,
    secs: f64,
}

fn synthetic_split(seed: u64) -> (Dataset, Dataset, Tokenizer) {
    let spec = SyntheticSpec {
        pool_size: 5,
        seed,
        ..SyntheticSpec::default()
    };
    let all = generate_synthetic(&spec, 2500).unwrap();
    let mut parts = split_dataset(&all, &[0.8, 0.2]).unwrap();
    let test = parts.pop().unwrap();
    let train = parts.pop().unwrap();
    assert_eq!((train.len(), test.len()), (2000, 500));
    (train, test, Tokenizer::new(spec.vocabulary()).unwrap())
}

fn synthetic_run(seed: u64, mode: FusionMode, lambda: f64) -> Run {
    let (train, test, tok) = synthetic_split(seed);
    let cfg = synthetic_config(mode, lambda, seed, MAX_STEPS, BATCH);
    let start = Instant::now();
    let mut trainer = Trainer::with_tokenizer(cfg.clone(), &train, tok.clone()).unwrap();
    trainer.run(|_| Ok(())).unwrap();
    let opts = EvalOptions {
        generate: false,
        ..EvalOptions::default()
    };
    let report = evaluate_model(trainer.model(), &tok, trainer.config(), &test, Setting::All, &opts).unwrap();
    let run = Run {
        r_at_1: report.r_at_1,
        trace: trainer.trace().clone(),
        secs: start.elapsed().as_secs_f64(),
    };
    eprintln!(
        "  run seed={seed} mode={mode} λ={lambda}: held-out R@1 {:.3}, max Loc {:.4}, {:.0}s",
        run.r_at_1,
        run.trace.max().unwrap_or(0.0),
        run.secs
    );
    run
}

struct SeedRuns {
    seed: u64,
    fused: Run,
    max: Run,
    supervised: Run,
}

fn artifact_dir() -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn emergence(runs: &[SeedRuns]) -> Outcome {
    let holds: Vec<bool> = runs
        .iter()
        .map(|r| r.fused.r_at_1 >= 0.90 && (0.05..=0.35).contains(&r.max.r_at_1))
        .collect();
    let n = holds.iter().filter(|&&h| h).count();
    let detail = runs
        .iter()
        .map(|r| format!("seed {}: fused {:.3} max {:.3}", r.seed, r.fused.r_at_1, r.max.r_at_1))
        .collect::<Vec<_>>()
        .join("; ");
    outcome(n >= 2, format!("{detail}; holds on {n}/3 (need fused ≥ 0.90, max in [0.05, 0.35] on ≥ 2)"))
}

fn loc_dynamics(runs: &[SeedRuns]) -> Outcome {
    let dir = artifact_dir();
    let mut traces = Vec::new();
    let mut labels = Vec::new();
    for r in runs {
        traces.push(r.fused.trace.clone());
        labels.push(format!("fused_seed{}", r.seed));
        traces.push(r.max.trace.clone());
        labels.push(format!("max_seed{}", r.seed));
    }
    let written = plot_loc(&traces, &labels, dir.join("loc_fused_vs_max.png")).unwrap();
    let holds: Vec<bool> = runs
        .iter()
        .map(|r| r.fused.trace.max().unwrap_or(0.0) >= 0.5 && r.max.trace.max().unwrap_or(1.0) <= 0.01)
        .collect();
    let n = holds.iter().filter(|&&h| h).count();
    let detail = runs
        .iter()
        .map(|r| {
            format!(
                "seed {}: fused peak {:.3} max peak {:.4}",
                r.seed,
                r.fused.trace.max().unwrap_or(0.0),
                r.max.trace.max().unwrap_or(0.0)
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    outcome(
        n >= 2,
        format!("{detail}; holds on {n}/3; CSV {}", written.csv.display()),
    )
}

fn supervision_consistency(runs: &[SeedRuns]) -> Outcome {
    let early = MAX_STEPS / 10;
    let mut n = 0;
    let mut parts = Vec::new();
    for r in runs {
        let sup_first = r.supervised.trace.first_step_at_least(0.5);
        let unsup_first = r.fused.trace.first_step_at_least(0.5);
        let r_ok = r.supervised.r_at_1 >= r.fused.r_at_1 - 0.05;
        let early_ok = sup_first.is_some_and(|s| s < early);
        let precedes = match (sup_first, unsup_first) {
            (Some(s), Some(u)) => s < u,
            (Some(_), None) => true,
            _ => false,
        };
        if r_ok && early_ok && precedes {
            n += 1;
        }
        parts.push(format!(
            "seed {}: R@1 {:.3} vs {:.3}, Loc ≥ 0.5 first at {:?} vs {:?}",
            r.seed, r.supervised.r_at_1, r.fused.r_at_1, sup_first, unsup_first
        ));
    }
    let dir = artifact_dir();
    let traces: Vec<LocTrace> = runs
        .iter()
        .flat_map(|r| [r.supervised.trace.clone(), r.fused.trace.clone()])
        .collect();
    let labels: Vec<String> = runs
        .iter()
        .flat_map(|r| [format!("lambda0.5_seed{}", r.seed), format!("lambda0_seed{}", r.seed)])
        .collect();
    let written = plot_loc(&traces, &labels, dir.join("loc_supervised_vs_unsupervised.png")).unwrap();
    outcome(
        n >= 2,
        format!(
            "{}; holds on {n}/3 (need R@1 ≥ unsupervised − 0.05 and Loc ≥ 0.5 before step {early} and before the unsupervised run); CSV {}",
            parts.join("; "),
            written.csv.display()
        ),
    )
}

// ---------------------------------------------------------------------------
// 8. harness invariants

fn small_config(micro: usize, max_steps: usize) -> TrainConfig {
    TrainConfig {
        effective_batch: 8,
        micro_batch: micro,
        max_steps,
        lr_pretrained: 3e-3,
        lr_raw: 1e-2,
        lambda: 0.3,
        k_len: 4,
        history_window: 2,
        max_len: 20,
        max_resp_len: 12,
        model: ModelConfig {
            d_model: 16,
            n_heads: 2,
            ffn_dim: 32,
            n_layers_enc: 1,
            n_layers_dec: 1,
            dropout: 0.1,
            max_positions: 32,
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn max_param_diff(a: &KMineModel, b: &KMineModel) -> f64 {
    a.params
        .ids()
        .map(|id| {
            (a.params.get(id) - b.params.get(id))
                .mapv(f64::abs)
                .fold(0.0, |x: f64, &y| x.max(y))
        })
        .fold(0.0, f64::max)
}

fn harness_invariants() -> Outcome {
    let spec = SyntheticSpec::default();
    let data = generate_synthetic(&spec, 40).unwrap();
    let tok = Tokenizer::new(spec.vocabulary()).unwrap();

    let mut whole = Trainer::with_tokenizer(small_config(8, 6), &data, tok.clone()).unwrap();
    let mut split = Trainer::with_tokenizer(small_config(2, 6), &data, tok.clone()).unwrap();
    whole.run_until(4).unwrap();
    split.run_until(4).unwrap();
    let accum = max_param_diff(whole.model(), split.model());

    let mut straight = Trainer::with_tokenizer(small_config(4, 6), &data, tok.clone()).unwrap();
    straight.set_deterministic(true);
    straight.run_until(6).unwrap();
    let mut first = Trainer::with_tokenizer(small_config(4, 6), &data, tok.clone()).unwrap();
    first.set_deterministic(true);
    first.run_until(3).unwrap();
    let saved = Checkpoint::from_json(&first.checkpoint().to_json()).unwrap();
    let mut resumed = Trainer::resume(&saved, &data).unwrap();
    resumed.set_deterministic(true);
    resumed.run_until(6).unwrap();
    let (a, b) = (straight.checkpoint(), resumed.checkpoint());
    let bitwise = a == b
        && a.params
            .iter()
            .zip(&b.params)
            .all(|(x, y)| x.value.iter().zip(&y.value).all(|(p, q)| p.to_bits() == q.to_bits()));

    let mut probe = Trainer::with_tokenizer(small_config(8, 10), &data, tok).unwrap();
    let mut lr_ok = true;
    for step in 0..10 {
        let rec = probe.step_once().unwrap();
        let want = (
            linear_decay(3e-3, step, 10),
            linear_decay(1e-2, step, 10),
        );
        let formula = (3e-3 * (1.0 - step as f64 / 10.0), 1e-2 * (1.0 - step as f64 / 10.0));
        lr_ok &= rec.rates == want && rec.rates == formula;
    }
    lr_ok &= linear_decay(5e-4, 2000, 2000) == 0.0;
    outcome(
        accum <= 1e-10 && bitwise && lr_ok,
        format!(
            "accumulation 8x1 vs 2x4 max|Δθ|={accum:.1e} (tol 1e-10); resume 3+3 vs 6 bitwise: {bitwise}; \
             lr = lr0·(1 − step/max_steps) exactly at 10 sampled steps: {lr_ok}"
        ),
    )
}

// ---------------------------------------------------------------------------

fn main() {
    let quick = std::env::var("KMINE_ACCEPTANCE_QUICK").is_ok_and(|v| v == "1");
    let mut results: Vec<(&str, Outcome)> = vec![
        ("1 metric exactness", metric_exactness()),
        ("2 gradient checks", gradient_checks()),
        ("3 gradient-flow ablation", gradient_flow()),
        ("4 aggregation equivalences", aggregation_equivalences()),
    ];
    let mut skipped = Vec::new();
    if quick {
        skipped.extend(["5 emergent selection", "6 Loc dynamics", "7 supervision consistency"]);
    } else {
        let runs: Vec<SeedRuns> = SEEDS
            .iter()
            .map(|&seed| SeedRuns {
                seed,
                fused: synthetic_run(seed, FusionMode::Fused, 0.0),
                max: synthetic_run(seed, FusionMode::Max, 0.0),
                supervised: synthetic_run(seed, FusionMode::Fused, 0.5),
            })
            .collect();
        results.push(("5 emergent selection", emergence(&runs)));
        results.push(("6 Loc dynamics", loc_dynamics(&runs)));
        results.push(("7 supervision consistency", supervision_consistency(&runs)));
    }
    results.push(("8 harness invariants", harness_invariants()));
    results.sort_by_key(|r| r.0);

    let mut failed = 0;
    for (name, o) in &results {
        println!("{} criterion {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    for name in &skipped {
        println!("SKIP criterion {name}: KMINE_ACCEPTANCE_QUICK=1");
    }
    println!("acceptance: {} passed, {failed} failed, {} skipped", results.len() - failed, skipped.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
