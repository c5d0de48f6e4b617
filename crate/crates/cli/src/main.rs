//! `distrank`: generate, rank, and evaluate multiple-choice distractors.
//!
//! Exit codes: 0 success, 1 validation or config error, 2 backend error,
//! 3 I/O error.

mod commands;
mod config;
mod error;
mod mockfile;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::AnalyzeInputs;
use crate::config::{parse_override, RunConfig};
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "distrank", version, about)]
struct Cli {
    /// Flat TOML config file; flags override its keys.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    /// Override any config key, e.g. `--set n=12`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_override, global = true)]
    overrides: Vec<(String, toml::Value)>,

    /// Dataset JSON-lines file.
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,

    /// Directory for artifacts and manifests.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,

    /// Response cache directory.
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,

    /// Global seed; every component derives a named sub-seed from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split the dataset into train.jsonl and test.jsonl.
    Split,
    /// Write SFT and DPO JSON-lines from a training set.
    ExportTraining,
    /// Overgenerate, then select k distractors per question.
    Generate(GenerateArgs),
    /// Ranking accuracy of the scorer on preference pairs.
    RankEval,
    /// Alignment of selections with the human distractors.
    Evaluate {
        /// Selection JSON-lines files. Repeatable.
        #[arg(long, required = true)]
        selections: Vec<PathBuf>,
    },
    /// Write rank.csv and rate.csv for teachers, plus answer keys.
    HumanevalExport {
        /// Top-k selection file supplying the generated distractors.
        #[arg(long)]
        selections: PathBuf,
        /// Number of questions to sample.
        #[arg(long)]
        items: Option<usize>,
    },
    /// Agreement and significance statistics from filled CSVs.
    HumanevalAnalyze {
        /// Filled rank.csv, one per rater.
        #[arg(long)]
        rank: Vec<PathBuf>,
        /// Answer key for the rank files [default: <output-dir>/rank.key.jsonl].
        #[arg(long)]
        rank_key: Option<PathBuf>,
        /// Filled rate.csv, one per rater.
        #[arg(long)]
        rate: Vec<PathBuf>,
        /// Answer key for the rate files [default: <output-dir>/rate.key.jsonl].
        #[arg(long)]
        rate_key: Option<PathBuf>,
    },
}

#[derive(Args)]
struct GenerateArgs {
    /// top_k, rand_k, or only_k.
    #[arg(long)]
    strategy: Option<String>,
    /// cot or ft.
    #[arg(long)]
    route: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
}

fn path_value(p: &std::path::Path) -> toml::Value {
    toml::Value::String(p.display().to_string())
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut overrides = cli.overrides.clone();
    let mut flag = |k: &str, v: Option<toml::Value>| {
        if let Some(v) = v {
            overrides.push((k.to_string(), v));
        }
    };
    flag("dataset", cli.dataset.as_deref().map(path_value));
    flag("output_dir", cli.output_dir.as_deref().map(path_value));
    flag("cache_dir", cli.cache_dir.as_deref().map(path_value));
    flag("seed", cli.seed.map(|s| toml::Value::Integer(s as i64)));
    match &cli.command {
        Command::Generate(g) => {
            flag("strategy", g.strategy.clone().map(toml::Value::String));
            flag("route", g.route.clone().map(toml::Value::String));
            flag("n", g.n.map(|n| toml::Value::Integer(n as i64)));
            flag("k", g.k.map(|k| toml::Value::Integer(k as i64)));
        }
        Command::HumanevalExport { items, .. } => {
            flag("eval_items", items.map(|n| toml::Value::Integer(n as i64)));
        }
        _ => {}
    }
    RunConfig::load(cli.config.as_deref(), &overrides)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let config = load_config(cli)?;
    match &cli.command {
        Command::Split => commands::split(&config),
        Command::ExportTraining => commands::export_training(&config),
        Command::Generate(_) => commands::generate(&config),
        Command::RankEval => commands::rank_eval(&config),
        Command::Evaluate { selections } => commands::evaluate(&config, selections),
        Command::HumanevalExport { selections, .. } => {
            commands::humaneval_export(&config, selections)
        }
        Command::HumanevalAnalyze {
            rank,
            rank_key,
            rate,
            rate_key,
        } => commands::humaneval_analyze(
            &config,
            AnalyzeInputs {
                rank,
                rank_key: rank_key.as_deref(),
                rate,
                rate_key: rate_key.as_deref(),
            },
        ),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
