use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use affectagent::cli::{self, CliError, RunConfig};
use affectagent::envsynth::Modality;

#[derive(Parser)]
#[command(
    name = "affectagent",
    about = "Multi-agent retrieval-augmented emotion recognition on synthetic data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run config; missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed (also seeds the synthetic dataset).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Ablation {
    #[arg(long)]
    no_planner: bool,
    #[arg(long)]
    no_filter: bool,
    #[arg(long)]
    no_confuse_evidence: bool,
    #[arg(long)]
    no_counter_evidence: bool,
    /// Drop one modality at evaluation: t, v or a.
    #[arg(long, value_parser = parse_modality)]
    drop_modality: Option<Modality>,
    #[arg(long)]
    no_retrieval: bool,
    #[arg(long)]
    naive_rag: bool,
    /// Empty the perceptual evidence lists (disables substitution).
    #[arg(long)]
    no_perceptual_evidence: bool,
}

fn parse_modality(s: &str) -> Result<Modality, String> {
    Modality::from_short(s).ok_or_else(|| format!("expected t, v or a, got {s:?}"))
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/test/corpus files and a manifest.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Warm start and MAPPO training on a generated dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory written by `synth`.
        #[arg(long)]
        data: PathBuf,
        /// Override the number of MAPPO iterations.
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Greedy evaluation of a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        ablation: Ablation,
    },
    /// Stepwise, agent/evidence and missing-modality ablation tables.
    Suite {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Run directory written by `train`; trains from scratch when
        /// omitted.
        #[arg(long)]
        run: Option<PathBuf>,
    },
}

fn load_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn print<T: Serialize>(value: &T) {
    use std::io::Write;
    let text = serde_json::to_string_pretty(value).expect("report serialises");
    // A closed pipe (e.g. `| head`) is not an error worth reporting.
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { common } => print(&cli::cmd_synth(&load_config(&common)?)?),
        Command::Train {
            common,
            data,
            iterations,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(n) = iterations {
                cfg.train.iterations = n;
            }
            print(&cli::cmd_train(&cfg, &data)?);
        }
        Command::Eval {
            common,
            checkpoint,
            data,
            ablation: a,
        } => {
            let mut cfg = load_config(&common)?;
            let f = &mut cfg.ablation;
            f.no_planner |= a.no_planner;
            f.no_filter |= a.no_filter;
            f.no_confuse_evidence |= a.no_confuse_evidence;
            f.no_counter_evidence |= a.no_counter_evidence;
            f.no_retrieval |= a.no_retrieval;
            f.naive_rag |= a.naive_rag;
            f.no_perceptual_evidence |= a.no_perceptual_evidence;
            if a.drop_modality.is_some() {
                f.drop_modality = a.drop_modality;
            }
            print(&cli::cmd_eval(&cfg, &checkpoint, &data)?);
        }
        Command::Suite { common, data, run } => {
            print(&cli::cmd_suite(&load_config(&common)?, &data, run.as_deref())?)
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let err = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{err}");
            ExitCode::FAILURE
        }
    }
}
