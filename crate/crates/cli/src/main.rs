use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use kmine::corpus::{generate_synthetic, load_jsonl};
use kmine::harness::{evaluate, plot_loc, Checkpoint, LocTrace, TrainConfig, Trainer};
use kmine::{FusionMode, Setting, SyntheticSpec, Tokenizer};

#[derive(Parser)]
#[command(name = "kmine", version, about = "Knowledge-fusion dialogue models: train, evaluate, synthesize data, plot Loc")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        mode: Option<FusionMode>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Resume from a checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a JSONL file and write a JSON report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "all")]
        setting: Setting,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic corpus; the vocabulary is written next to it.
    Synth {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge Loc traces into one CSV and draw them.
    PlotLoc {
        #[arg(long, num_args = 1.., required = true)]
        traces: Vec<PathBuf>,
        /// Series labels; defaults to the trace file stems.
        #[arg(long, num_args = 1..)]
        labels: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train {
            config,
            mode,
            lambda,
            seed,
            resume,
        } => {
            let mut cfg = TrainConfig::read(&config).with_context(|| format!("reading {}", config.display()))?;
            if let Some(m) = mode {
                cfg.mode = m;
            }
            if let Some(l) = lambda {
                cfg.lambda = l;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let Some(data_path) = cfg.train_data.clone() else {
                bail!("config has no train_data");
            };
            let data = load_jsonl(&data_path, cfg.setting)?;
            let out_dir = cfg.out_dir.clone();
            std::fs::create_dir_all(&out_dir)?;
            let mut trainer = match resume {
                Some(path) => Trainer::resume(&Checkpoint::load(&path)?, &data)?,
                None => Trainer::new(cfg, &data)?,
            };
            log::info!(
                "training {} turns, {} parameters, {} steps",
                data.len(),
                trainer.model().params.num_scalars(),
                trainer.config().max_steps
            );
            let dir = out_dir.clone();
            trainer.run(|ck| {
                let path = dir.join(format!("checkpoint-{}.json", ck.step));
                log::info!("saving {}", path.display());
                ck.save(path)
            })?;
            let ck = trainer.checkpoint();
            ck.save(out_dir.join("checkpoint.json"))?;
            ck.trace.write_csv(out_dir.join("loc_trace.csv"))?;
            std::fs::write(out_dir.join("config.toml"), ck.config.to_toml())?;
            if let Some(valid) = &ck.config.valid_data {
                let report = evaluate(&ck, &load_jsonl(valid, Setting::All)?, ck.config.setting)?;
                std::fs::write(out_dir.join("valid_report.json"), serde_json::to_string_pretty(&report)?)?;
                log::info!("valid R@1 {:.3} ppl {:.3}", report.r_at_1, report.ppl);
            }
            println!("{}", out_dir.join("checkpoint.json").display());
        }
        Command::Eval {
            checkpoint,
            data,
            setting,
            out,
        } => {
            let ck = Checkpoint::load(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let data = load_jsonl(&data, Setting::All)?;
            let report = evaluate(&ck, &data, setting)?;
            let json = serde_json::to_string_pretty(&report)?;
            std::fs::write(&out, &json)?;
            println!("{json}");
        }
        Command::Synth { spec, n, out } => {
            let spec: SyntheticSpec = match spec {
                Some(p) => toml::from_str(&std::fs::read_to_string(&p)?).with_context(|| format!("parsing {}", p.display()))?,
                None => SyntheticSpec::default(),
            };
            let data = generate_synthetic(&spec, n)?;
            data.write_jsonl(&out)?;
            let vocab = out.with_extension("vocab");
            Tokenizer::new(spec.vocabulary())?.write_vocab(&vocab)?;
            println!("{} turns -> {} (vocabulary {})", data.len(), out.display(), vocab.display());
        }
        Command::PlotLoc { traces, labels, out } => {
            let labels = if labels.is_empty() {
                traces
                    .iter()
                    .map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default())
                    .collect()
            } else {
                labels
            };
            let loaded = traces
                .iter()
                .map(|p| LocTrace::read_csv(p).with_context(|| format!("reading {}", p.display())))
                .collect::<Result<Vec<_>>>()?;
            let written = plot_loc(&loaded, &labels, &out)?;
            println!("{} {}", written.png.display(), written.csv.display());
        }
    }
    Ok(())
}
