use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod error;
mod manifest;

use config::{Overrides, RunConfig};
use error::CliError;
use optiset_core::metrics::SimilarityKind;

#[derive(Debug, Parser)]
#[command(
    name = "optiset",
    version,
    about = "Set-level evidence selection pipeline"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// JSON run config; relative paths in it resolve against its directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Candidate pool size.
    #[arg(long, global = true)]
    k: Option<usize>,
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    prompts_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    base_url: Option<String>,
    #[arg(long, global = true)]
    model_name: Option<String>,
    /// Use the mock backend configured by this file.
    #[arg(long, global = true)]
    mock_config: Option<PathBuf>,
    /// Use the built-in heuristic mock backend.
    #[arg(long, global = true)]
    mock: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the lexical index from the corpus.
    Ingest,
    /// Retrieve the top-k pool for every question.
    Retrieve,
    /// Run expand, select and refine.
    Select {
        /// Only this question; writes `<id>.trace.json`.
        #[arg(long)]
        query_id: Option<String>,
        /// Hide gold answers from the selector.
        #[arg(long, conflicts_with = "use_answer")]
        training_free: bool,
        /// Show gold answers to the selector.
        #[arg(long)]
        use_answer: bool,
    },
    /// Build labeled set-list training data.
    Synthesize,
    /// Fit the preference-map coefficients to entropy changes.
    FitAlphabeta {
        /// JSONL of `{query_id, delta_h}`; defaults to `deltas.jsonl` in out_dir.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Run the loss invariant and gradient checks and emit the parity fixture.
    Losscheck,
    /// Answer with each selection and score EM, F1, size and novelty.
    Evaluate {
        /// Selections JSONL; defaults to `selections.jsonl` in out_dir.
        #[arg(long)]
        selections: Option<PathBuf>,
        #[arg(long, default_value = "run")]
        run_id: String,
    },
    /// Novelty of each selection, overall and by set size.
    Novelty {
        #[arg(long)]
        selections: Option<PathBuf>,
        #[arg(long, value_enum)]
        similarity: Option<Similarity>,
    },
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum Similarity {
    Jaccard,
    EmbeddingCosine,
}

impl From<Similarity> for SimilarityKind {
    fn from(s: Similarity) -> Self {
        match s {
            Similarity::Jaccard => SimilarityKind::Jaccard,
            Similarity::EmbeddingCosine => SimilarityKind::EmbeddingCosine,
        }
    }
}

fn load_config(g: &GlobalArgs) -> Result<(RunConfig, Vec<u8>), CliError> {
    let (mut cfg, bytes) = match &g.config {
        Some(path) => RunConfig::load(path)?,
        None => (RunConfig::default(), b"{}".to_vec()),
    };
    cfg.apply(&Overrides {
        seed: g.seed,
        out_dir: g.out_dir.clone(),
        k: g.k,
        corpus: g.corpus.clone(),
        dataset: g.dataset.clone(),
        prompts_dir: g.prompts_dir.clone(),
        base_url: g.base_url.clone(),
        model_name: g.model_name.clone(),
        mock_config: g.mock_config.clone(),
        mock: g.mock,
    });
    cfg.validate()?;
    Ok((cfg, bytes))
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (cfg, bytes) = load_config(&cli.global)?;
    let ctx = commands::Context::new(cfg, bytes)?;
    match cli.command {
        Command::Ingest => commands::ingest(&ctx),
        Command::Retrieve => commands::retrieve(&ctx),
        Command::Select {
            query_id,
            training_free,
            use_answer,
        } => {
            let mode = if use_answer {
                Some(true)
            } else if training_free {
                Some(false)
            } else {
                None
            };
            commands::select(&ctx, query_id.as_deref(), mode)
        }
        Command::Synthesize => commands::synthesize(&ctx),
        Command::FitAlphabeta { input } => commands::fit_alphabeta(&ctx, input),
        Command::Losscheck => commands::losscheck(&ctx),
        Command::Evaluate { selections, run_id } => commands::evaluate(&ctx, selections, &run_id),
        Command::Novelty {
            selections,
            similarity,
        } => commands::novelty(&ctx, selections, similarity.map(Into::into)),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("optiset: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
