//! Trains one model on the synthetic selection task and reports held-out R@1.
//!
//! ```text
//! cargo run --release --example synthetic_emergence -- fused 0.0 1 [steps]
//! ```

use std::time::Instant;

use kmine::corpus::{generate_synthetic, split_dataset};
use kmine::harness::{evaluate_model, EvalOptions, Trainer};
use kmine::{FusionMode, Setting, SyntheticSpec, Tokenizer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mode: FusionMode = args.first().map_or(Ok(FusionMode::Fused), |s| s.parse())?;
    let lambda: f64 = args.get(1).map_or(Ok(0.0), |s| s.parse())?;
    let seed: u64 = args.get(2).map_or(Ok(1), |s| s.parse())?;
    let steps: usize = args.get(3).map_or(Ok(2000), |s| s.parse())?;
    let batch: usize = std::env::var("BATCH").ok().and_then(|s| s.parse().ok()).unwrap_or(32);

    let spec = SyntheticSpec {
        seed,
        ..SyntheticSpec::default()
    };
    let all = generate_synthetic(&spec, 2500)?;
    let mut parts = split_dataset(&all, &[0.8, 0.2])?;
    if std::env::var("ORACLE").is_ok() {
        for p in parts.iter_mut() {
            for t in p.turns.iter_mut() {
                let g = t.gold_index.expect("synthetic gold");
                t.pool = vec![t.pool[g].clone()];
                t.gold_index = Some(0);
            }
        }
    }
    let tok = Tokenizer::new(spec.vocabulary())?;
    let mut cfg = kmine::harness::synthetic_config(mode, lambda, seed, steps, batch);
    let env = |k: &str| std::env::var(k).ok().and_then(|v| v.parse::<f64>().ok());
    if let Some(lr) = env("LR") {
        cfg.lr_pretrained = lr;
        cfg.lr_raw = lr;
    }
    if let Some(lr) = env("LR_RAW") {
        cfg.lr_raw = lr;
    }
    if let Some(d) = env("D") {
        cfg.model.d_model = d as usize;
        cfg.model.ffn_dim = 2 * d as usize;
    }
    if let Some(t) = env("TEMP") {
        cfg.temperature = t;
    }
    let mut trainer = Trainer::with_tokenizer(cfg.clone(), &parts[0], tok.clone())?;
    let start = Instant::now();
    let stop: usize = std::env::var("STOP").ok().and_then(|s| s.parse().ok()).unwrap_or(steps);
    while trainer.step() < stop && !trainer.is_done() {
        let r = trainer.step_once()?;
        if r.step % 25 == 0 {
            println!("step {:4} loss {:.4} loc {:.4}", r.step, r.loss, r.mean_loc);
        }
    }
    let train_secs = start.elapsed().as_secs_f64();
    let opts = EvalOptions {
        generate: false,
        ..EvalOptions::default()
    };
    let report = evaluate_model(trainer.model(), &tok, &cfg, &parts[1], Setting::All, &opts)?;
    println!(
        "mode={mode} lambda={lambda} seed={seed}: R@1 {:.3}  ppl {:.3}  loc {:.3}  ({train_secs:.1}s)",
        report.r_at_1, report.ppl, report.mean_loc
    );
    Ok(())
}
