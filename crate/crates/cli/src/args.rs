//! Command-line surface. Every flag carries a help line; clap rejects
//! unknown flags with a usage error.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub const PRESETS: [&str; 5] = ["full", "rag_off", "copilot_off", "memory_off", "react_on"];

#[derive(Debug, Parser)]
#[command(name = "orsim", version, about = "Deterministic operating-room simulation sandbox")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate one case and write its transcript and simulated report.
    Run(RunArgs),
    /// Simulate and score a corpus under one or more ablation presets.
    Eval(EvalArgs),
    /// Produce a seeded batch of simulated reports.
    Batch(BatchArgs),
    /// Build a knowledge bank file from a directory of documents.
    Ingest(IngestArgs),
    /// Generate a synthetic case corpus.
    GenCases(GenCasesArgs),
    /// Re-render a transcript and re-derive its report, checking both.
    Replay(ReplayArgs),
    /// Start the HTTP service.
    Serve(ServeArgs),
    /// Rewrite a long-memory file, keeping record order and ids.
    Compact(CompactArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendKind {
    /// Rule-table backend; fully deterministic.
    Scripted,
    /// Chat-completions endpoint from ORSIM_API_BASE, ORSIM_API_KEY and ORSIM_MODEL.
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EmbedderKind {
    /// Feature-hashing embedder; offline and deterministic.
    Hash,
    /// Embeddings endpoint from ORSIM_API_BASE, ORSIM_API_KEY and ORSIM_EMBED_MODEL.
    Remote,
}

/// Backend, knowledge and trigger selection shared by simulating commands.
#[derive(Debug, Clone, Args)]
pub struct EngineArgs {
    /// Generation backend.
    #[arg(long, value_enum, default_value_t = BackendKind::Scripted)]
    pub backend: BackendKind,
    /// Rule table for the scripted backend: a TOML file or `bundled`.
    #[arg(long, value_name = "PATH|bundled", default_value = "bundled")]
    pub rules: String,
    /// Intraoperative event triggers: a JSON file or `bundled`.
    #[arg(long, value_name = "PATH|bundled", default_value = "bundled")]
    pub triggers: String,
    /// Knowledge bank file written by `ingest`; repeatable. Without any,
    /// the bundled knowledge library is used.
    #[arg(long = "bank", value_name = "FILE")]
    pub banks: Vec<PathBuf>,
    /// Embedder for retrieval queries; must match the embedder of every bank.
    #[arg(long, value_enum, default_value_t = EmbedderKind::Hash)]
    pub embedder: EmbedderKind,
}

/// Where cases come from.
#[derive(Debug, Clone, Args)]
pub struct CorpusArgs {
    /// Corpus directory (or its manifest.json), `fixture` for the bundled
    /// reference case, or `syntheticN` for N generated cases.
    #[arg(long, value_name = "DIR|fixture|syntheticN", default_value = "fixture")]
    pub corpus: String,
    /// Generator seed for a `syntheticN` corpus.
    #[arg(long, value_name = "SEED", default_value_t = 0)]
    pub corpus_seed: u64,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Case file; a missing `.json` extension is added.
    #[arg(long, value_name = "PATH")]
    pub case: PathBuf,
    /// Simulation seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for `<case>-s<seed>.transcript.jsonl` and `.report.json`.
    #[arg(long, value_name = "DIR", default_value = ".")]
    pub out: PathBuf,
    /// Ablation preset.
    #[arg(long, default_value = "full", value_parser = PRESETS)]
    pub preset: String,
    /// Long-memory file to read lessons from and append the case record to.
    #[arg(long, value_name = "FILE")]
    pub memory: Option<PathBuf>,
    #[command(flatten)]
    pub engine: EngineArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// Base seed; each case derives its own seed from this and its id.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Ablation preset; repeat for a comparison table.
    #[arg(long = "preset", default_value = "full", value_parser = PRESETS)]
    pub presets: Vec<String>,
    /// Output directory for `eval-<preset>.json`, `cases-<preset>.jsonl` and `table.txt`.
    #[arg(long, value_name = "DIR", default_value = "eval-out")]
    pub out: PathBuf,
    #[command(flatten)]
    pub engine: EngineArgs,
}

#[derive(Debug, Args)]
pub struct BatchArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// Number of reports; item i simulates case i modulo the corpus size.
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    /// Base seed for the batch.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for `<sim_id>.report.json` files.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Ablation preset.
    #[arg(long, default_value = "full", value_parser = PRESETS)]
    pub preset: String,
    #[command(flatten)]
    pub engine: EngineArgs,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Directory of `.md` and `.txt` documents, read recursively.
    #[arg(long, value_name = "DIR")]
    pub docs: PathBuf,
    /// Bank id, e.g. a role binding such as `chief_surgeon`.
    #[arg(long)]
    pub bank_id: String,
    /// Bank file to write.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Chunk size in characters.
    #[arg(long, default_value_t = orsim_core::knowledge::DEFAULT_CHUNK_SIZE)]
    pub chunk_size: usize,
    /// Characters shared by consecutive chunks.
    #[arg(long, default_value_t = orsim_core::knowledge::DEFAULT_CHUNK_OVERLAP)]
    pub overlap: usize,
    /// Embedder for the chunks.
    #[arg(long, value_enum, default_value_t = EmbedderKind::Hash)]
    pub embedder: EmbedderKind,
}

#[derive(Debug, Args)]
pub struct GenCasesArgs {
    /// Number of cases, split evenly over the disease labels.
    #[arg(long)]
    pub n: usize,
    /// Generator seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory; must be absent or empty.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Corpus id recorded in the manifest; defaults to `synthetic-<n>-s<seed>`.
    #[arg(long)]
    pub corpus_id: Option<String>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// Transcript file written by `run`.
    #[arg(long, value_name = "FILE")]
    pub transcript: PathBuf,
    /// Simulated report to compare against; defaults to the sibling
    /// `.report.json` when present.
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,
    /// Vocabulary JSON (a corpus manifest also works) or `bundled`.
    #[arg(long, value_name = "PATH|bundled", default_value = "bundled")]
    pub vocabulary: String,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Listen address; port 0 picks a free port.
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// Shared bearer token required on every endpoint except /health.
    #[arg(long, env = "ORSIM_TOKEN", hide_env_values = true)]
    pub token: Option<String>,
    /// Milliseconds between turns of autonomous sessions.
    #[arg(long, default_value_t = 1000)]
    pub pace_ms: u64,
    /// Seconds a trainee may hold a turn before the agent takes it back.
    #[arg(long, default_value_t = 120)]
    pub human_timeout_s: u64,
    /// Long-memory file shared by sessions.
    #[arg(long, value_name = "FILE")]
    pub memory: Option<PathBuf>,
    #[command(flatten)]
    pub engine: EngineArgs,
}

#[derive(Debug, Args)]
pub struct CompactArgs {
    /// Long-memory file to rewrite in place.
    #[arg(long, value_name = "FILE")]
    pub memory: PathBuf,
}
