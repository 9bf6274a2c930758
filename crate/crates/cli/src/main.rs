//! `urm4dmu`: the whole pipeline behind one binary.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 internal
//! invariant failure. Failures print one JSON line on standard error.

mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "urm4dmu", version, about = "User representations for darknet-market forums")]
struct Cli {
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic multi-market corpus with ground-truth identities.
    Synth(SynthArgs),
    /// Validate a post JSONL file and infer missing thread starters.
    Ingest(IngestArgs),
    /// Build the token vocabulary.
    Vocab(VocabArgs),
    /// Heterogeneous graph construction and metapath embedding.
    #[command(subcommand)]
    Graph(GraphCommand),
    /// Train a single-task or multi-task model.
    Train(TrainArgs),
    /// Embed episodes with a trained checkpoint.
    Embed(EmbedArgs),
    /// Score an episode-embedding file with retrieval metrics.
    Eval(EvalArgs),
    /// Train and score the full model next to its ablated variants.
    Ablate(AblateArgs),
    /// Print a run directory's manifest, optionally re-checking every hash.
    Manifest(ManifestArgs),
}

#[derive(Debug, Subcommand)]
enum GraphCommand {
    /// Build per-market graphs and write their statistics and edge lists.
    Build(GraphBuildArgs),
    /// Generate metapath walks and train node embeddings.
    Train(GraphTrainArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Generator spec (JSON); its `seed` may be omitted when --seed is given.
    #[arg(long)]
    spec: PathBuf,
    /// Overrides the spec seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct IngestArgs {
    /// Post JSONL file.
    #[arg(long)]
    posts: PathBuf,
    /// Identity map JSON to validate and carry along.
    #[arg(long, conflicts_with = "identity_from_usernames")]
    identity: Option<PathBuf>,
    /// Derive an identity map by matching case-folded usernames across markets.
    #[arg(long)]
    identity_from_usernames: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct VocabArgs {
    /// Run config (TOML, or JSON by extension).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    posts: Option<PathBuf>,
    #[arg(long)]
    max_size: Option<usize>,
    #[arg(long)]
    min_count: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GraphBuildArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    posts: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GraphTrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    posts: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seeds both the walk sampler and skip-gram training.
    #[arg(long)]
    seed: Option<u64>,
    /// Embedding width.
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    walks_per_start: Option<usize>,
    /// Walk length in nodes.
    #[arg(long)]
    target_len: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    negatives: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    step_size: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OptimizerArg {
    Adam,
    Sgd,
}

/// Inputs and overrides shared by `train` and `ablate`.
#[derive(Debug, Args)]
struct TrainInputs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    posts: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Node embeddings from `graph train` (required unless graph context is off).
    #[arg(long)]
    graph: Option<PathBuf>,
    /// Identity map; multi-task runs otherwise derive one from usernames.
    #[arg(long)]
    identity: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Single-task training on this market.
    #[arg(long, conflicts_with = "markets")]
    market: Option<String>,
    /// Multi-task training over these markets (comma separated).
    #[arg(long, value_delimiter = ',')]
    markets: Option<Vec<String>>,
    /// Multi-task without the cross-market identity head.
    #[arg(long)]
    no_cross: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    step_size: Option<f64>,
    #[arg(long, value_enum)]
    optimizer: Option<OptimizerArg>,
    /// Stride between test-split episode windows.
    #[arg(long)]
    eval_stride: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    inputs: TrainInputs,
    /// Drop the time features.
    #[arg(long)]
    no_time: bool,
    /// Drop the graph context features.
    #[arg(long)]
    no_graph: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Test,
    Train,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LabelArg {
    Author,
    Identity,
}

#[derive(Debug, Args)]
struct EmbedArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    posts: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    graph: Option<PathBuf>,
    /// Attaches identity groups to the rows.
    #[arg(long)]
    identity: Option<PathBuf>,
    /// Markets to embed (default: the checkpoint's).
    #[arg(long, value_delimiter = ',')]
    markets: Option<Vec<String>>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// `URM4E` file; its `.json` sidecar must sit next to it.
    #[arg(long)]
    embeddings: PathBuf,
    /// Same author in the same market, or same identity group across markets.
    #[arg(long, value_enum)]
    labels: Option<LabelArg>,
    /// Recall cut-offs (comma separated).
    #[arg(long, value_delimiter = ',')]
    ks: Option<Vec<usize>>,
    /// Last histogram position before the overflow bucket.
    #[arg(long)]
    max_pos: Option<usize>,
    /// Evaluate a random subset of this many queries.
    #[arg(long)]
    sample: Option<usize>,
    /// Seed for --sample (default: the config seed).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    inputs: TrainInputs,
    /// Add the "- graph context" variant.
    #[arg(long)]
    no_graph: bool,
    /// Add a time ablation: "- graph context - time" with --no-graph, else "- time".
    #[arg(long)]
    no_time: bool,
    #[arg(long, value_enum)]
    labels: Option<LabelArg>,
}

#[derive(Debug, Args)]
struct ManifestArgs {
    /// Run directory holding `manifest.json`.
    #[arg(long)]
    run: PathBuf,
    /// Re-hash every input and output; exit 2 on any mismatch.
    #[arg(long)]
    verify: bool,
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(CliError::usage("--jobs must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::internal(e.to_string()))?;
    }
    match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Ingest(a) => commands::ingest(a),
        Command::Vocab(a) => commands::vocab(a),
        Command::Graph(GraphCommand::Build(a)) => commands::graph_build(a),
        Command::Graph(GraphCommand::Train(a)) => commands::graph_train(a),
        Command::Train(a) => commands::train(a),
        Command::Embed(a) => commands::embed(a),
        Command::Eval(a) => commands::eval(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Manifest(a) => commands::manifest(a),
    }
}

fn fail(e: &CliError) -> ExitCode {
    eprintln!("{}", e.to_json());
    ExitCode::from(e.kind.code() as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("URM4DMU_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.render().to_string();
            let first = message.lines().next().unwrap_or("usage error").trim_start_matches("error: ");
            return fail(&CliError::usage(first));
        }
    };
    std::panic::set_hook(Box::new(|_| {}));
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => fail(&e),
        Err(payload) => {
            let msg = payload
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            fail(&CliError::internal(format!("internal invariant failure: {msg}")))
        }
    }
}
