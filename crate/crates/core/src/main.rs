use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use eci_cot::pipeline::{Overrides, Pipeline, PipelineConfig, StageStatus};
use eci_cot::store::Stage;
use eci_cot::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_STAGE: u8 = 3;
const EXIT_GATE: u8 = 4;

/// Build, rewrite and evaluate causal-reasoning traces for event causality
/// identification.
#[derive(Debug, Parser)]
#[command(name = "eci-cot", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run configuration (TOML).
    #[arg(long, global = true, default_value = "eci-cot.toml")]
    config: PathBuf,

    /// Fold to train/test on (1-based).
    #[arg(long, global = true)]
    fold: Option<usize>,

    /// Selection strategy: per-model:<endpoint>, lowest-ppl or long-only:<endpoint>[,...].
    #[arg(long, global = true)]
    strategy: Option<String>,

    /// Perplexity gate: corpus-mean or per-trace.
    #[arg(long, global = true)]
    gate_mode: Option<String>,

    /// Evaluation template: zero_shot, zero_shot_cot, few_shot_icl or intervention_wrong.
    #[arg(long, global = true)]
    template: Option<String>,

    /// Bind a role to a configured endpoint, e.g. `--endpoint subject=qwen`.
    #[arg(long = "endpoint", global = true, value_name = "ROLE=NAME", value_parser = parse_binding)]
    endpoints: Vec<(String, String)>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output root (runs/ and cache/ are created under it).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Load the corpus into dataset.jsonl.
    Ingest,
    /// Partition topics into folds and write train/test sets.
    Split,
    /// Generate few-shot traces with each pool endpoint.
    Generate,
    /// Rewrite correct traces with the target model and apply the perplexity gate.
    Rewrite,
    /// Choose one trace per pair across pools.
    Select,
    /// Write fine-tuning records (sft.jsonl).
    Export,
    /// Evaluate the subject endpoint.
    Evaluate,
    /// Evaluate the subject under contradicting interventions.
    Robustness,
    /// Collect evaluation reports into report.csv.
    Report,
    /// Run ingest through export in order.
    Build,
}

fn parse_binding(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .filter(|(r, n)| !r.is_empty() && !n.is_empty())
        .map(|(r, n)| (r.to_string(), n.to_string()))
        .ok_or_else(|| format!("expected ROLE=NAME, got `{s}`"))
}

fn stages(c: Command) -> Vec<Stage> {
    match c {
        Command::Ingest => vec![Stage::Ingest],
        Command::Split => vec![Stage::Split],
        Command::Generate => vec![Stage::Generate],
        Command::Rewrite => vec![Stage::Rewrite],
        Command::Select => vec![Stage::Select],
        Command::Export => vec![Stage::Export],
        Command::Evaluate => vec![Stage::Evaluate],
        Command::Robustness => vec![Stage::Robustness],
        Command::Report => vec![Stage::Report],
        Command::Build => eci_cot::pipeline::TRAINING_STAGES.to_vec(),
    }
}

fn exit_for(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        _ => EXIT_STAGE,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let overrides = Overrides {
        fold: cli.fold,
        strategy: cli.strategy.clone(),
        gate_mode: cli.gate_mode.clone(),
        template: cli.template.clone(),
        endpoints: cli.endpoints.clone(),
        seed: cli.seed,
        out: cli.out.clone(),
    };
    let pipeline = match PipelineConfig::load(&cli.config)
        .and_then(|mut c| c.apply(&overrides).map(|_| c))
        .and_then(Pipeline::new)
    {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };

    let mut gate_failed = false;
    for stage in stages(cli.command) {
        match pipeline.run(stage) {
            Ok(StageStatus::Completed) => eprintln!("{stage}: done"),
            Ok(StageStatus::UpToDate) => eprintln!("{stage}: up to date"),
            Ok(StageStatus::GateFailed) => {
                eprintln!("{stage}: perplexity gate failed, original traces kept");
                gate_failed = true;
            }
            Err(e) => {
                eprintln!("error in {stage}: {e}");
                return ExitCode::from(exit_for(&e));
            }
        }
    }
    if gate_failed {
        ExitCode::from(EXIT_GATE)
    } else {
        ExitCode::SUCCESS
    }
}
