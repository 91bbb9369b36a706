//! `steprm`: pipeline stages for step-level process supervision and
//! PRM-guided test-time scaling.
//!
//! Exit codes: 0 success, 2 config error, 3 budget exhausted, 4 backend
//! failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use steprm::config::{build_backends, BackendKind, RunConfig};
use steprm::pipeline::{self, PipelineError};
use steprm::tts::Strategy;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BackendChoice {
    Http,
    Sim,
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse()
}

#[derive(Debug, Parser)]
#[command(name = "steprm", version, about)]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Selection strategy for tts (greedy | one-shot | step-agg | majority).
    #[arg(long, global = true, value_parser = parse_strategy)]
    strategy: Option<Strategy>,

    /// Candidate count N.
    #[arg(long, global = true)]
    n: Option<u32>,

    /// Greedy step cap.
    #[arg(long, global = true)]
    max_steps: Option<usize>,

    /// Root seed for all named random streams.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// MC threshold for step labels (strict >).
    #[arg(long, global = true)]
    threshold: Option<f64>,

    /// Backend kind for all roles.
    #[arg(long, global = true, value_enum)]
    backend: Option<BackendChoice>,

    /// Scripted outputs for the simulated backend.
    #[arg(long, global = true)]
    sim_script: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Problems JSONL file.
    #[arg(long, global = true)]
    problems: Option<PathBuf>,

    /// Labeled-samples JSONL (balance/stats/export inputs).
    #[arg(long, global = true)]
    labeled: Option<PathBuf>,

    /// Outcomes JSONL (eval/analysis inputs).
    #[arg(long, global = true)]
    outcomes: Option<PathBuf>,

    /// Step-annotated benchmark JSONL (eval-steps input).
    #[arg(long, global = true)]
    bench: Option<PathBuf>,

    /// Continue an interrupted run, skipping journaled problem ids.
    #[arg(long, global = true)]
    resume: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Construct labeled samples: rollouts, judging, consensus, truncation.
    RolloutLabel,
    /// Build the balanced variant of a labeled-samples file.
    Balance,
    /// Accounting statistics for a labeled-samples file.
    Stats,
    /// Export step-supervision training records.
    Export,
    /// Run a test-time-scaling strategy over a problems file.
    Tts,
    /// Step-level macro-F1 of the PRM on an annotated benchmark.
    EvalSteps,
    /// Answer accuracy of an outcomes file.
    EvalAccuracy,
    /// Score-distribution histograms of incorrect selections.
    AnalyzeScores,
    /// BoN@k accuracy curve from full-pool outcomes.
    BonCurve,
    /// Generate rephrased-positive / mutated-negative perception pairs.
    MutatePerception,
}

fn resolve_config(cli: &Cli) -> Result<RunConfig, PipelineError> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(|e| PipelineError::Config(e.to_string()))?,
        None => RunConfig::default(),
    };
    if let Some(strategy) = cli.strategy {
        config.run.strategy = strategy;
    }
    if let Some(n) = cli.n {
        config.run.n = n;
    }
    if let Some(max_steps) = cli.max_steps {
        config.run.max_steps = max_steps;
    }
    if let Some(seed) = cli.seed {
        config.run.seed = seed;
    }
    if let Some(threshold) = cli.threshold {
        config.run.mc_threshold = threshold;
    }
    if let Some(backend) = cli.backend {
        let kind = match backend {
            BackendChoice::Http => BackendKind::Http,
            BackendChoice::Sim => BackendKind::Sim,
        };
        config.backends.policy.kind = kind;
        config.backends.prm.kind = kind;
        config.backends.judge.kind = kind;
    }
    if let Some(path) = &cli.sim_script {
        config.io.sim_script = Some(path.clone());
    }
    if let Some(path) = &cli.out {
        config.io.out_dir = Some(path.clone());
    }
    if let Some(path) = &cli.problems {
        config.io.problems = Some(path.clone());
    }
    if let Some(path) = &cli.labeled {
        config.io.labeled = Some(path.clone());
    }
    if let Some(path) = &cli.outcomes {
        config.io.outcomes = Some(path.clone());
    }
    if let Some(path) = &cli.bench {
        config.io.bench = Some(path.clone());
    }
    config
        .validate()
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    Ok(config)
}

async fn run(cli: Cli) -> Result<(), PipelineError> {
    let config = resolve_config(&cli)?;
    match cli.command {
        Command::RolloutLabel => {
            let backends = build_backends(&config)?;
            let summary = pipeline::run_rollout_label(&config, &backends, cli.resume).await?;
            println!(
                "rollout-label: {} problems, {} labeled, {} discarded, {} quarantined ({} requests)",
                summary.problems,
                summary.labeled,
                summary.discarded,
                summary.quarantined,
                summary.budget.requests
            );
        }
        Command::Balance => {
            let summary = pipeline::run_balance(&config)?;
            println!(
                "balance: {} -> {} samples via majority source {:?} ({} all-correct / {} has-incorrect)",
                summary.input_samples,
                summary.output_samples,
                summary.majority_source,
                summary.all_correct,
                summary.has_incorrect
            );
        }
        Command::Stats => {
            let stats = pipeline::run_stats(&config)?;
            println!(
                "stats: {} training samples, {} steps ({} incorrect)",
                stats.total.training_samples, stats.total.total_steps, stats.total.incorrect_steps
            );
        }
        Command::Export => {
            let records = pipeline::run_export(&config)?;
            println!("export: {records} training records");
        }
        Command::Tts => {
            let backends = build_backends(&config)?;
            let summary = pipeline::run_tts_stage(&config, &backends, cli.resume).await?;
            println!(
                "tts[{}]: {} problems, {} errored, accuracy {:.4} ({} requests)",
                config.run.strategy,
                summary.problems,
                summary.errored,
                summary.accuracy.overall,
                summary.budget.requests
            );
        }
        Command::EvalSteps => {
            let backends = build_backends(&config)?;
            let report = pipeline::run_eval_steps(&config, &backends).await?;
            println!(
                "eval-steps: macro-F1 {:.4} over {} steps ({} neutral dropped)",
                report.overall, report.samples, report.dropped_neutral
            );
        }
        Command::EvalAccuracy => {
            let report = pipeline::run_eval_accuracy(&config)?;
            println!(
                "eval-accuracy: {:.4} over {} problems",
                report.overall, report.samples
            );
        }
        Command::AnalyzeScores => {
            let histograms = pipeline::run_analyze_scores(&config)?;
            for (strategy, histogram) in &histograms {
                match histogram.mean {
                    Some(mean) => println!(
                        "analyze-scores[{strategy}]: {} incorrect, mean score {mean:.4}",
                        histogram.incorrect_total
                    ),
                    None => println!("analyze-scores[{strategy}]: no incorrect outcomes"),
                }
            }
        }
        Command::BonCurve => {
            let rows = pipeline::run_bon_curve(&config)?;
            for row in &rows {
                println!(
                    "bon-curve[{}] k={}: {:.4} over {} problems",
                    row.strategy, row.k, row.accuracy, row.problems
                );
            }
        }
        Command::MutatePerception => {
            let backends = build_backends(&config)?;
            let summary = pipeline::run_mutate_perception(&config, &backends).await?;
            println!(
                "mutate-perception: {} pairs, {} quarantined",
                summary.pairs, summary.quarantined
            );
        }
    }
    Ok(())
}

#[tokio::main]
async fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            eprintln!("error: {error}");
            ExitCode::from(error.exit_code() as u8)
        }
    }
}
