//! `tlg`: embed fact sets, train and evaluate the attention-pooling
//! classifier, rank facts and analyse generated facts.
//!
//! Exit codes: 0 success, 1 validation or usage error, 2 runtime failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tlg_core::trainer::TrainConfig;

#[derive(Parser, Debug)]
#[command(name = "tlg", version, about = "Commonsense-violation detection from atomic facts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Embed every fact set of a facts file and write a manifest.
    Embed(EmbedArgs),
    /// k-fold cross-validation over one manifest.
    Crossval(CrossvalArgs),
    /// Train on one manifest, test on another.
    Transfer(TransferArgs),
    /// Train on a full manifest and save the parameters.
    Train(TrainArgs),
    /// Attention logits of one image's facts, highest first.
    RankFacts(RankArgs),
    /// Length, overlap, similarity and marker-word statistics.
    Analyze(AnalyzeArgs),
    /// Write a synthetic facts file, mock embeddings and manifest.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
pub struct EmbedArgs {
    #[arg(long)]
    pub facts: PathBuf,
    /// Output directory for `<image_id>.tlge` files and `manifest.json`.
    #[arg(long)]
    pub out: PathBuf,
    /// Use the deterministic hash embedder instead of a service.
    #[arg(long, conflicts_with = "endpoint")]
    pub mock: bool,
    #[arg(long, default_value_t = 16, requires = "mock")]
    pub dim: usize,
    #[arg(long, default_value_t = 32, requires = "mock")]
    pub max_tokens: usize,
    /// Mock only: token whose vectors get an offset along a fixed direction.
    #[arg(long, requires = "mock")]
    pub marker_token: Option<String>,
    #[arg(long, default_value_t = 10.0, requires = "marker_token")]
    pub marker_offset: f64,
    /// Embedding service base URL.
    #[arg(long, env = "TLG_ENDPOINT")]
    pub endpoint: Option<String>,
    #[arg(long, default_value_t = 60.0)]
    pub timeout_secs: f64,
    #[arg(long, default_value_t = 4)]
    pub max_in_flight: usize,
    #[arg(long, default_value_t = 3)]
    pub retries: u32,
    /// Overwrite existing embedding files and manifest.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug, Clone)]
pub struct TrainFlags {
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub l2: f64,
    #[arg(long, default_value_t = 1.0)]
    pub init_scale: f64,
    #[arg(long, default_value_t = tlg_core::pooling::DEFAULT_EPSILON)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl TrainFlags {
    pub fn config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            epsilon: self.epsilon,
            weight_init_scale: self.init_scale,
            l2_penalty: self.l2,
        }
    }
}

#[derive(Args, Debug)]
pub struct CrossvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(2..))]
    pub k: u64,
    #[command(flatten)]
    pub train: TrainFlags,
    /// Directory for crossval.json, crossval.txt and crossval.csv.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TransferArgs {
    #[arg(long)]
    pub train_manifest: PathBuf,
    #[arg(long)]
    pub test_manifest: PathBuf,
    #[command(flatten)]
    pub train: TrainFlags,
    /// Directory for transfer.json, transfer.txt, params.json and history.csv.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub train: TrainFlags,
    /// Directory for params.json and history.csv.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RankArgs {
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub image_id: String,
    /// Where the JSON ranking goes.
    #[arg(long, default_value = "rank-facts.json")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// JSON keyword lexicon; the built-in table is used when omitted.
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    #[arg(long)]
    pub split_by_label: bool,
    #[arg(long, default_value_t = tlg_core::pooling::DEFAULT_EPSILON)]
    pub epsilon: f64,
    /// Directory for analysis.json and analysis.txt.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub n_per_class: usize,
    #[arg(long, default_value_t = 5)]
    pub n_facts: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 12)]
    pub max_tokens: usize,
    #[arg(long, default_value_t = 10.0)]
    pub marker_offset: f64,
    #[arg(long, default_value_t = 0.0)]
    pub domain_shift: f64,
    #[arg(long)]
    pub paired: bool,
    #[arg(long, default_value = "synthetic")]
    pub tag: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub force: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Embed(a) => commands::embed(a),
        Command::Crossval(a) => commands::crossval(a),
        Command::Transfer(a) => commands::transfer(a),
        Command::Train(a) => commands::train(a),
        Command::RankFacts(a) => commands::rank_facts(a),
        Command::Analyze(a) => commands::analyze(a),
        Command::Synth(a) => commands::synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
