//! `selfdemo` — operate the self-demo data pipeline end to end.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use selfdemo::config::RunConfig;
use selfdemo::pipeline;

#[derive(Parser)]
#[command(name = "selfdemo", version, about = "Self-demo dataset pipeline and RAG evaluator")]
struct Cli {
    /// Run configuration (JSON, with ${VAR} env interpolation).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config's global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the config's call-cache directory.
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,

    /// Resume from checkpoints and the call cache instead of starting fresh.
    #[arg(long, global = true)]
    resume: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize system messages for both answer modes and write the
    /// prompt-set file (including the fixed refusal prompt).
    OptimizePrompts,
    /// Generate self-demos over the training corpus with judge filtering.
    GenerateDemos,
    /// Render SFT and DPO training files from the self-demo file.
    Export,
    /// Label candidate outputs over the eval corpus and write the metrics
    /// report.
    Evaluate,
    /// Evaluate across the configured retrieval-count schedule.
    Sweep,
    /// Render a report file as a plain-text table.
    Report {
        /// Report file to render; defaults to the config's report path.
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let path = cli
        .config
        .as_ref()
        .context("--config is required for this command")?;
    let mut config = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(cache_dir) = &cli.cache_dir {
        config.cache_dir = Some(cache_dir.clone());
    }
    Ok(config)
}

fn run(cli: &Cli) -> anyhow::Result<ExitCode> {
    match &cli.command {
        Command::OptimizePrompts => {
            let config = load_config(cli)?;
            let path = pipeline::cmd_optimize_prompts(&config, cli.resume)?;
            println!("wrote prompt set to {}", path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::GenerateDemos => {
            let config = load_config(cli)?;
            let manifest = pipeline::cmd_generate_demos(&config)?;
            println!(
                "demos: {} answer, {} refusal, {} skipped, {} failed ({} warnings) of {} instances",
                manifest.answer,
                manifest.refusal,
                manifest.skipped,
                manifest.failed,
                manifest.warnings,
                manifest.total
            );
            // Warnings and skips are not hard errors; failed instances are.
            if manifest.failed > 0 {
                eprintln!("{} instance(s) failed", manifest.failed);
                return Ok(ExitCode::FAILURE);
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Export => {
            let config = load_config(cli)?;
            let manifests = pipeline::cmd_export(&config)?;
            println!(
                "sft: {} exported ({} answer, {} refusal); dpo: {} exported, {} skipped",
                manifests.sft.exported,
                manifests.sft.answer_kind,
                manifests.sft.refusal_kind,
                manifests.dpo.exported,
                manifests.dpo.skipped
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Evaluate => {
            let config = load_config(cli)?;
            let report = pipeline::cmd_evaluate(&config)?;
            println!("wrote report to {}", config.outputs.report.display());
            print!("{}", selfdemo::evaluator::render_table(&report));
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep => {
            let config = load_config(cli)?;
            let written = pipeline::cmd_sweep(&config)?;
            for (n, path) in &written {
                println!("n={n}: {}", path.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Report { input } => {
            let path = match input {
                Some(path) => path.clone(),
                None => load_config(cli)?.outputs.report,
            };
            print!("{}", pipeline::render_report_file(&path)?);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
