use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use demosel::config::{Profile, RunConfig};
use demosel::eval::Normalization;
use demosel::pipeline::{Pipeline, Stage};
use demosel::Error;

/// Demonstration retrieval for mixed-task information extraction.
#[derive(Parser)]
#[command(name = "demosel", version)]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    /// TOML run file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Hyperparameter base: paper or desk.
    #[arg(long, global = true)]
    profile: Option<Profile>,
    /// Directory relative artifact paths resolve against.
    #[arg(long, global = true)]
    work_dir: Option<PathBuf>,
    /// Base seed for sampling and initialization
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Demonstrations retrieved per query.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Weight of the contrastive term.
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Contrastive temperature.
    #[arg(long, global = true)]
    tau: Option<f64>,
    /// Train without keyword tags
    #[arg(long, global = true)]
    no_keyword: bool,
    /// Distill from raw LLM scores instead of the reward model
    #[arg(long, global = true)]
    no_reward: bool,
    /// Drop the distillation term from retriever training
    #[arg(long, global = true)]
    no_distill: bool,
    /// Span comparison: exact or lower.
    #[arg(long, global = true)]
    normalize: Option<Normalization>,
    /// Worker threads
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic pool and query files.
    SynthFixtures,
    /// Validate the raw pool and queries.
    BuildPool,
    /// Index the pool with BM25 and draw initial candidates.
    Bm25Init,
    /// Score candidates with the language model and split positives/negatives.
    LlmScore,
    /// Train the cross-encoder reward model.
    TrainReward,
    /// Train the bi-encoder retriever.
    TrainRetriever,
    /// Encode the pool with the trained retriever.
    Index,
    /// Top-k demonstrations for every query.
    Retrieve,
    /// Prompt the generation backend with retrieved demonstrations.
    Infer,
    /// Micro-F1 of the predictions per dataset and task.
    Eval,
    /// Every stage in order.
    RunAll {
        /// Generate synthetic fixtures first.
        #[arg(long)]
        synth: bool,
    },
    /// Print the effective configuration as TOML.
    ShowConfig,
}

fn effective_config(o: &Overrides) -> Result<RunConfig, Error> {
    let mut cfg = match &o.config {
        Some(path) => RunConfig::load(path, o.profile)?,
        None => RunConfig::for_profile(o.profile.unwrap_or_default()),
    };
    if let Some(d) = &o.work_dir {
        cfg.work_dir = d.clone();
    }
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(k) = o.k {
        cfg.inference.k_shot = k;
    }
    if let Some(a) = o.alpha {
        cfg.retriever.alpha = a;
    }
    if let Some(t) = o.tau {
        cfg.retriever.tau = t;
    }
    if let Some(n) = o.normalize {
        cfg.eval.normalize = n;
    }
    if let Some(t) = o.threads {
        cfg.threads = t;
    }
    cfg.ablation.no_keyword |= o.no_keyword;
    cfg.ablation.no_reward |= o.no_reward;
    cfg.ablation.no_distill |= o.no_distill;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    let cfg = effective_config(&cli.overrides)?;
    if let Command::ShowConfig = cli.command {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let pipeline = Pipeline::new(cfg)?;
    let reports = match cli.command {
        Command::RunAll { synth } => pipeline.run_all(synth)?,
        cmd => {
            let stage = match cmd {
                Command::SynthFixtures => Stage::SynthFixtures,
                Command::BuildPool => Stage::BuildPool,
                Command::Bm25Init => Stage::Bm25Init,
                Command::LlmScore => Stage::LlmScore,
                Command::TrainReward => Stage::TrainReward,
                Command::TrainRetriever => Stage::TrainRetriever,
                Command::Index => Stage::Index,
                Command::Retrieve => Stage::Retrieve,
                Command::Infer => Stage::Infer,
                Command::Eval => Stage::Eval,
                Command::RunAll { .. } | Command::ShowConfig => unreachable!(),
            };
            vec![pipeline.run(stage)?]
        }
    };
    for r in reports {
        println!("{}: {}", r.stage.name(), r.summary.trim_end());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
