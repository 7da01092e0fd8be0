mod commands;
mod config;
mod serve;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use config::{EmbedderKind, ScorerKind};

#[derive(Parser, Debug)]
#[command(name = "regkit", version, about = "Compliance-document retrieval toolkit")]
struct Cli {
    /// TOML config file. Flags override its values.
    #[arg(long, global = true, env = "REGKIT_CONFIG")]
    config: Option<PathBuf>,

    #[arg(long, global = true, value_enum)]
    embedder: Option<EmbedderKind>,

    #[arg(long, global = true, value_enum)]
    scorer: Option<ScorerKind>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Incremental scan, chunk, embed and index into a state directory.
    Sync(SyncArgs),
    /// Scan a source and write normalized documents as JSONL.
    Ingest(IngestArgs),
    /// Chunk normalized documents into a chunk dump.
    Chunk(ChunkArgs),
    /// Build, query and maintain a vector index file.
    #[command(subcommand)]
    Index(IndexCommand),
    /// Retrieve contexts for one question from a state directory.
    Query(QueryArgs),
    /// Build the listwise reranker training set.
    BuildTrainData(TrainArgs),
    /// Build the held-out evaluation set.
    BuildEvalData(EvalDataArgs),
    /// Score precomputed evaluation instances with all nine metrics.
    Evaluate(EvaluateArgs),
    /// Run the strategy x rerank x K grid.
    Ablate(AblateArgs),
    /// Time retrieval with and without reranking per k.
    Profile(ProfileArgs),
    /// Serve retrieval over HTTP.
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
pub struct StrategyArg {
    /// rcs, hisacc or sentence.
    #[arg(long)]
    pub strategy: Option<regkit_core::chunking::Strategy>,
    #[arg(long)]
    pub max_tokens: Option<usize>,
    #[arg(long)]
    pub overlap: Option<usize>,
    #[arg(long)]
    pub theta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub window: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SyncArgs {
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long, default_value = ".regkit")]
    pub state: PathBuf,
    #[command(flatten)]
    pub chunking: StrategyArg,
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ChunkArgs {
    #[arg(long)]
    pub docs: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub chunking: StrategyArg,
}

#[derive(Args, Debug)]
pub struct IndexKindArgs {
    /// flat or ivf.
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long)]
    pub nlist: Option<usize>,
    #[arg(long)]
    pub nprobe: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
pub enum IndexCommand {
    Build {
        #[arg(long)]
        chunks: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        kind: IndexKindArgs,
    },
    Search {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long)]
        nprobe: Option<usize>,
    },
    /// Insert or replace the chunks of a dump.
    Upsert {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        chunks: PathBuf,
    },
    /// Retrain IVF centroids over the current contents.
    Rebuild {
        #[arg(long)]
        index: PathBuf,
    },
}

#[derive(Args, Debug)]
pub struct QueryArgs {
    #[arg(long, default_value = ".regkit")]
    pub state: PathBuf,
    #[arg(long)]
    pub question: String,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long)]
    pub rerank: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub docs: PathBuf,
    #[arg(long)]
    pub chunks: PathBuf,
    /// QA pairs to use instead of the template generator.
    #[arg(long)]
    pub qa: Option<PathBuf>,
    #[arg(long)]
    pub fraction: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub negatives: Option<usize>,
    /// Negatives per tier as cross,intra,fallback.
    #[arg(long)]
    pub quotas: Option<regkit_core::dataset::NegativeQuota>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalDataArgs {
    #[arg(long)]
    pub docs: PathBuf,
    /// Training JSONL; its positives' file ids are excluded.
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub qa: Option<PathBuf>,
    #[arg(long)]
    pub fraction: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// JSONL of evaluation instances with responses and retrieved contexts.
    #[arg(long)]
    pub instances: PathBuf,
    #[arg(long)]
    pub tau: Option<f64>,
    /// Per-instance results JSONL.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub docs: PathBuf,
    #[arg(long)]
    pub eval: PathBuf,
    /// Comma-separated K values.
    #[arg(long, value_delimiter = ',')]
    pub k: Option<Vec<usize>>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Writes report.csv, report.txt and instances.jsonl here.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct ProfileArgs {
    #[arg(long, default_value = ".regkit")]
    pub state: PathBuf,
    /// Questions, one per line, or an evaluation JSONL.
    #[arg(long)]
    pub questions: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "3,5,10,15")]
    pub k: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    pub rounds: usize,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long, default_value = ".regkit")]
    pub state: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: String,
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_env("REGKIT_LOG").unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let mut config = config::Config::load(cli.config.as_deref())?;
    if let Some(kind) = cli.embedder {
        config.embedder.kind = kind;
    }
    if let Some(kind) = cli.scorer {
        config.scorer.kind = kind;
    }
    match cli.command {
        Command::Sync(a) => commands::sync(&config, a),
        Command::Ingest(a) => commands::ingest(a),
        Command::Chunk(a) => commands::chunk(&config, a),
        Command::Index(c) => commands::index(&config, c),
        Command::Query(a) => commands::query(&config, a),
        Command::BuildTrainData(a) => commands::build_train_data(&config, a),
        Command::BuildEvalData(a) => commands::build_eval_data(&config, a),
        Command::Evaluate(a) => commands::evaluate(&config, a),
        Command::Ablate(a) => commands::ablate(&config, a),
        Command::Profile(a) => commands::profile(&config, a),
        Command::Serve(a) => serve::run(&config, a),
    }
}
