//! `maskgen`: drives the dataset → tokenizer → generator → adapter → sampling
//! → evaluation pipeline over a run directory.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use maskgen_core::config::RunConfig;
use maskgen_core::experiments;
use maskgen_core::Error;
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "maskgen", version, about = "Masked token generation with self-guided sampling")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dot-path override such as `generator.layers=4`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Master seed, replacing `seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true, env = "MASKGEN_OUT")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Generate the train and eval image splits.
    Dataset,
    /// Fit the patch codebook and tokenize both splits.
    Tokenizer,
    /// Train the masked token generator.
    Train,
    /// Fine-tune the guidance adapter against the frozen generator.
    Finetune,
    /// Draw samples with the `[sampling]` settings.
    Sample,
    /// Score generated samples with the desk metrics.
    Eval,
    /// Evaluate the `[sweep]` grid, resuming from an existing table.
    Sweep,
}

fn print_json(value: &impl Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("summaries serialize"));
}

fn run(cli: &Cli) -> Result<(), Error> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out: PathBuf = cli.out.clone().or_else(|| cfg.out_dir.clone()).unwrap_or_else(|| PathBuf::from("runs/default"));
    let out: &Path = &out;
    log::info!("run directory {}", out.display());
    match cli.command {
        Command::Dataset => print_json(&experiments::cmd_dataset(&cfg, out)?),
        Command::Tokenizer => print_json(&experiments::cmd_tokenizer(&cfg, out)?),
        Command::Train => print_json(&experiments::cmd_train(&cfg, out)?),
        Command::Finetune => print_json(&experiments::cmd_finetune(&cfg, out)?),
        Command::Sample => print_json(&experiments::cmd_sample(&cfg, out)?),
        Command::Eval => print_json(&experiments::cmd_eval(&cfg, out)?),
        Command::Sweep => {
            let s = experiments::cmd_sweep(&cfg, out)?;
            println!("{} rows ({} computed, {} already present)", s.rows.len(), s.computed, s.skipped);
            println!("{}", experiments::RunDir::new(out).sweep_table().display());
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::MissingArtifact { .. } => 3,
        Error::DigestMismatch { .. } => 4,
        Error::EvaluationUnavailable(_) => 5,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
