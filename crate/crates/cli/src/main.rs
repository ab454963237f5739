//! PromptVeil command line: obfuscate, evaluate, attack, targets, report.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use promptveil::runner::{
    run_attack, run_evaluate, run_obfuscate, run_report, run_targets, AttackKind, ExperimentConfig,
    Method,
};

#[derive(Parser)]
#[command(
    name = "promptveil",
    about = "System-prompt obfuscation: optimize, evaluate, and red-team surrogate prompts",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config JSON.
    #[arg(long, short = 'c')]
    config: PathBuf,
    /// Override the config's output directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Override the obfuscation seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the optimization method (hard|soft).
    #[arg(long)]
    method: Option<String>,
}

impl ConfigArgs {
    fn load(&self) -> promptveil::Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::from_json_file(&self.config)?;
        if let Some(dir) = &self.output_dir {
            cfg.output_dir = dir.clone();
        }
        if let Some(seed) = self.seed {
            cfg.obfuscation.seed = seed;
        }
        if let Some(method) = &self.method {
            cfg.obfuscation.method = match method.as_str() {
                "hard" => Method::Hard,
                "soft" => Method::Soft,
                other => {
                    return Err(promptveil::Error::ConfigError(format!(
                        "unknown method {other:?} (hard|soft)"
                    )))
                }
            };
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate and cache target outputs for the training split.
    Targets {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run the configured obfuscation and write prompt/trace/manifest.
    Obfuscate {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Score blank/obfuscated/original conditions on the test split.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Prompt artifact; defaults to the one in the output dir.
        #[arg(long)]
        artifact: Option<PathBuf>,
    },
    /// Run a deobfuscation attack against a prompt artifact.
    Attack {
        #[command(flatten)]
        config: ConfigArgs,
        /// inject | project | fluency_soft | fluency_hard
        #[arg(long = "attack")]
        attack: String,
        /// Prompt artifact; defaults to the one in the output dir.
        #[arg(long)]
        artifact: Option<PathBuf>,
    },
    /// Print the stored tables of a run directory.
    Report {
        /// Run directory holding score tables and attack summaries.
        #[arg(long)]
        run_dir: PathBuf,
    },
}

fn default_artifact(cfg: &ExperimentConfig) -> PathBuf {
    match cfg.obfuscation.method {
        Method::Hard => cfg.output_dir.join("obf_prompt.json"),
        Method::Soft => cfg.output_dir.join("obf_prompt.sobf"),
    }
}

fn run(cli: Cli) -> promptveil::Result<()> {
    match cli.command {
        Command::Targets { config } => {
            let cfg = config.load()?;
            let report = run_targets(&cfg)?;
            println!(
                "targets: generated {}, cache hits {}, failures {}",
                report.generated, report.cache_hits, report.failures
            );
        }
        Command::Obfuscate { config } => {
            let cfg = config.load()?;
            let outcome = run_obfuscate(&cfg)?;
            if outcome.reused_existing {
                println!("reusing existing run (same config hash)");
            }
            println!("prompt:   {}", outcome.prompt_artifact.display());
            println!("trace:    {}", outcome.trace_path.display());
            println!("manifest: {}", outcome.manifest_path.display());
        }
        Command::Evaluate { config, artifact } => {
            let cfg = config.load()?;
            let artifact = artifact.unwrap_or_else(|| default_artifact(&cfg));
            let outcome = run_evaluate(&cfg, &artifact)?;
            if outcome.checkpoint_fallback {
                eprintln!("warning: no checkpoints found, scored the final artifact only");
            }
            println!("table: {}", outcome.table_csv.display());
            if let Some(idx) = outcome.deployable_checkpoint {
                println!("deployable checkpoint: {idx}");
            }
            print!("{}", run_report(&cfg.output_dir)?);
        }
        Command::Attack {
            config,
            attack,
            artifact,
        } => {
            let cfg = config.load()?;
            let kind: AttackKind = attack.parse()?;
            let artifact = artifact.unwrap_or_else(|| default_artifact(&cfg));
            let outcome = run_attack(&cfg, &artifact, kind)?;
            println!("report: {}", outcome.report_path.display());
            println!("{}", serde_json::to_string_pretty(&outcome.summary)?);
        }
        Command::Report { run_dir } => {
            print!("{}", run_report(&run_dir)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
