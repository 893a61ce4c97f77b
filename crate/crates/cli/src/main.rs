mod commands;
mod config;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use config::RunConfig;
use std::path::PathBuf;

/// Retrieval-reward training lab for dialog response generation.
#[derive(Parser)]
#[command(name = "coral", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic grammar corpus (train/valid/test) to a run directory.
    Synth(Overrides),
    /// Train the ESIM response scorer.
    TrainRetrieval(Overrides),
    /// Train the generator with CE or CORAL.
    TrainS2s {
        #[command(flatten)]
        overrides: Overrides,
        /// Continue an interrupted train-s2s run directory with its own config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Decode one response per test context.
    Generate(Overrides),
    /// Score generations against the test split.
    Evaluate(Overrides),
    /// Sweep p_plus x margin x mode and write ablation.csv.
    Ablate(Overrides),
}

#[derive(Args, Default)]
struct Overrides {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Any config key, as KEY=VALUE; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    scorer: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    generations: Option<String>,
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    p_plus: Option<String>,
    #[arg(long)]
    margin: Option<String>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    top_p: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    decode: Option<String>,
}

impl Overrides {
    /// Defaults, then the config file, then `--set`, then named flags.
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(p) = &self.config {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            cfg.apply_text(&text).with_context(|| format!("in {}", p.display()))?;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .with_context(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        let named = [
            ("seed", &self.seed),
            ("data", &self.data),
            ("out", &self.out),
            ("scorer", &self.scorer),
            ("model", &self.model),
            ("generations", &self.generations),
            ("loss", &self.loss),
            ("p_plus", &self.p_plus),
            ("margin", &self.margin),
            ("mode", &self.mode),
            ("top_p", &self.top_p),
            ("epochs", &self.epochs),
            ("batch_size", &self.batch_size),
            ("decode", &self.decode),
        ];
        for (k, v) in named {
            if let Some(v) = v {
                cfg.set(k, v)?;
            }
        }
        commands::pin_paths(&mut cfg)?;
        Ok(cfg)
    }
}

fn main_inner() -> Result<PathBuf> {
    match Cli::parse().command {
        Command::Synth(o) => commands::synth(&o.resolve()?),
        Command::TrainRetrieval(o) => commands::train_retrieval_cmd(&o.resolve()?),
        Command::TrainS2s { overrides, resume } => match resume {
            Some(dir) => {
                let text = std::fs::read_to_string(dir.join("effective.conf"))
                    .with_context(|| format!("{} is not a run directory", dir.display()))?;
                let mut cfg = RunConfig::default();
                cfg.apply_text(&text)?;
                commands::train_s2s(&cfg, Some(&dir))
            }
            None => commands::train_s2s(&overrides.resolve()?, None),
        },
        Command::Generate(o) => commands::generate(&o.resolve()?),
        Command::Evaluate(o) => commands::evaluate(&o.resolve()?),
        Command::Ablate(o) => commands::ablate_cmd(&o.resolve()?),
    }
}

fn main() {
    match main_inner() {
        Ok(dir) => println!("run directory: {}", dir.display()),
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(1);
        }
    }
}
