use std::path::PathBuf;
use std::process::ExitCode;

use cascade_tune::experiment::{self, ExperimentConfig};
use cascade_tune::schedule::Protocol;
use cascade_tune::Error;
use clap::{Args, Parser, Subcommand};

/// Liver lesion cascade: synthetic data, pre-training, protocol fine-tuning and evaluation.
#[derive(Parser, Debug)]
#[command(name = "cascade-tune", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment configuration (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    /// Worker threads for independent experiment cells.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic pre-training and target datasets.
    GenData,
    /// Train the liver and lesion networks on the pre-training corpus.
    Pretrain,
    /// Fine-tune the lesion network on the training folds of one fold.
    Finetune {
        #[arg(long)]
        protocol: String,
        #[arg(long)]
        fold: usize,
    },
    /// Evaluate a fine-tuned checkpoint on the test subjects of one fold.
    Evaluate {
        #[arg(long)]
        fold: usize,
        /// Checkpoint directory; defaults to the one written by `finetune`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        protocol: Option<String>,
    },
    /// All protocols x folds x seeds, with the comparison report.
    Experiment,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::UnknownProtocol(_) | Error::UnknownBlock(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = load_config(&cli.common)?;
    let c = &cli.common;
    if c.threads == 0 {
        return Err(Failure::Usage("--threads must be at least 1".into()));
    }
    match cli.command {
        Command::GenData => {
            experiment::cmd_gen_data(&cfg, c.force)?;
            println!("datasets written under {}", cfg.output_dir.join("data").display());
        }
        Command::Pretrain => {
            experiment::cmd_pretrain(&cfg, c.force)?;
            println!("checkpoints written under {}", cfg.pretrain_dir().display());
        }
        Command::Finetune { protocol, fold } => {
            let protocol: Protocol = protocol.parse()?;
            let seed = c.seed.unwrap_or(cfg.seeds[0]);
            let r = experiment::cmd_finetune(&cfg, protocol, fold, seed, c.force)?;
            let s = r.scores;
            println!(
                "{protocol} fold {fold} seed {seed}: success {:.4} dice1 {:.4} dice2 {:.4} acc {:.4}",
                s.success, s.dice1, s.dice2, s.accuracy
            );
        }
        Command::Evaluate { fold, checkpoint, protocol } => {
            let dir = match (checkpoint, protocol) {
                (Some(dir), _) => dir,
                (None, Some(p)) => {
                    let p: Protocol = p.parse()?;
                    cfg.cell_dir(p, fold, c.seed.unwrap_or(cfg.seeds[0])).join("checkpoint")
                }
                (None, None) => return Err(Failure::Usage("evaluate needs --checkpoint or --protocol".into())),
            };
            let s = experiment::cmd_evaluate(&cfg, &dir, fold)?;
            println!(
                "success,dice1,dice2,acc\n{},{},{},{}",
                s.success, s.dice1, s.dice2, s.accuracy
            );
        }
        Command::Experiment => {
            if let Some(seed) = c.seed {
                cfg.seeds = vec![seed];
            }
            let report = experiment::cmd_experiment(&cfg, c.threads)?;
            print!("{}", report.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let level = std::env::var("CASCADE_TUNE_LOG").unwrap_or_else(|_| "info".into());
    env_logger::Builder::new().parse_filters(&level).format_timestamp(None).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
