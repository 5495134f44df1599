//! Operator entry points over the simulation library, behind the single
//! `orsim` binary.
//!
//! Exit codes: 0 on success, 1 on a domain error (bad case file, failed
//! run, replay mismatch, errored eval cases), 2 on a usage error (bad
//! flags, missing remote credentials). A failing command removes the
//! files it created.

pub mod args;
mod commands;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use orsim_core::agent::backend::{GenerationBackend, RuleTableError, ScriptedBackend};
use orsim_core::copilot::{LongMemoryStore, MemoryError};
use orsim_core::domain::{EventTrigger, SurgicalCase};
use orsim_core::eval::{AblationFlags, EvalError};
use orsim_core::fixtures;
use orsim_core::knowledge::{
    Embedder, HashEmbedder, KnowledgeBank, KnowledgeError, KnowledgeLibrary, DEFAULT_CHUNK_OVERLAP,
    DEFAULT_CHUNK_SIZE,
};
use orsim_core::records::{load_corpus, write_atomic, RecordsError};
use orsim_core::runner::RunSpec;
use orsim_core::synth::{generate_synthetic_cases, uniform_mix, SynthError};
use orsim_core::vocab::Vocabulary;
use orsim_core::workflow::{SimConfig, TurnPolicy, WorkflowError};
use orsim_remote::{ConfigError, RemoteBackend, RemoteEmbedder};
use thiserror::Error;

pub use args::Cli;
use args::{BackendKind, Command, CorpusArgs, EmbedderKind, EngineArgs};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{code}: {message}")]
    Usage { code: &'static str, message: String },
    #[error("{code}: {message}")]
    Domain { code: &'static str, message: String },
}

impl CliError {
    pub fn usage(code: &'static str, message: impl Into<String>) -> Self {
        CliError::Usage {
            code,
            message: message.into(),
        }
    }

    pub fn domain(code: &'static str, message: impl Into<String>) -> Self {
        CliError::Domain {
            code,
            message: message.into(),
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            CliError::Usage { code, .. } | CliError::Domain { code, .. } => code,
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage { .. } => 2,
            CliError::Domain { .. } => 1,
        }
    }
}

macro_rules! domain_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::domain(e.code(), e.to_string())
            }
        }
    )*};
}

domain_from!(RecordsError, WorkflowError, EvalError, KnowledgeError, MemoryError, SynthError);

impl From<RuleTableError> for CliError {
    fn from(e: RuleTableError) -> Self {
        CliError::domain("InvalidConfig", e.to_string())
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::usage(e.code(), e.to_string())
    }
}

/// Files and directories a command created. Unless committed, they are
/// removed again when the guard drops, so a failed command leaves no
/// partial output behind.
#[derive(Debug, Default)]
pub struct Outputs {
    files: Vec<PathBuf>,
    dirs: Vec<PathBuf>,
    committed: bool,
}

impl Outputs {
    /// Creates `dir` and its missing parents, remembering the topmost
    /// one that did not exist.
    pub fn dir(&mut self, dir: &Path) -> Result<(), CliError> {
        let mut top = None;
        let mut p = Some(dir);
        while let Some(d) = p.filter(|d| !d.as_os_str().is_empty() && !d.exists()) {
            top = Some(d.to_path_buf());
            p = d.parent();
        }
        fs::create_dir_all(dir).map_err(|e| CliError::domain("IoError", format!("{}: {e}", dir.display())))?;
        self.dirs.extend(top);
        Ok(())
    }

    pub fn write(&mut self, path: &Path, contents: &str) -> Result<(), CliError> {
        if let Some(parent) = path.parent() {
            self.dir(parent)?;
        }
        let existed = path.exists();
        write_atomic(path, contents)?;
        if !existed {
            self.track(path.to_path_buf());
        }
        Ok(())
    }

    pub fn track(&mut self, path: PathBuf) {
        self.files.push(path);
    }

    pub fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for f in self.files.iter().rev() {
            let _ = fs::remove_file(f);
        }
        for d in self.dirs.iter().rev() {
            let _ = fs::remove_dir_all(d);
        }
    }
}

pub fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::domain("IoError", format!("{}: {e}", path.display())))
}

/// Resolves a case path, adding `.json` when the bare path is missing.
pub fn resolve_case_path(path: &Path) -> PathBuf {
    if !path.exists() && path.extension().is_none() {
        let with = path.with_extension("json");
        if with.exists() {
            return with;
        }
    }
    path.to_path_buf()
}

/// Cases and vocabulary named by a `--corpus` value.
pub fn load_cases(args: &CorpusArgs) -> Result<(Vec<SurgicalCase>, Vocabulary), CliError> {
    if args.corpus == "fixture" {
        return Ok((vec![fixtures::case01()], fixtures::vocabulary()));
    }
    if let Some(n) = args.corpus.strip_prefix("synthetic") {
        if !Path::new(&args.corpus).exists() {
            let n: usize = n
                .parse()
                .map_err(|_| CliError::usage("InvalidConfig", format!("bad corpus `{}`: expected syntheticN", args.corpus)))?;
            let vocab = fixtures::vocabulary();
            let cases = generate_synthetic_cases(n, args.corpus_seed, &uniform_mix(), &vocab)?;
            return Ok((cases, vocab));
        }
    }
    let corpus = load_corpus(Path::new(&args.corpus))?;
    let vocab = corpus.vocabulary();
    Ok((corpus.cases, vocab))
}

pub fn load_vocabulary(arg: &str) -> Result<Vocabulary, CliError> {
    if arg == "bundled" {
        return Ok(fixtures::vocabulary());
    }
    serde_json::from_str(&read_text(Path::new(arg))?)
        .map_err(|e| CliError::domain("ParseError", format!("{arg}: {e}")))
}

pub fn preset_flags(name: &str) -> Result<AblationFlags, CliError> {
    AblationFlags::preset(name).ok_or_else(|| CliError::usage("InvalidConfig", format!("unknown preset `{name}`")))
}

pub fn open_memory(path: Option<&Path>) -> Result<Option<Arc<LongMemoryStore>>, CliError> {
    path.map(|p| LongMemoryStore::open(p).map(Arc::new).map_err(CliError::from))
        .transpose()
}

fn embedder(kind: EmbedderKind) -> Result<Arc<dyn Embedder>, CliError> {
    Ok(match kind {
        EmbedderKind::Hash => Arc::new(HashEmbedder::default()),
        EmbedderKind::Remote => Arc::new(RemoteEmbedder::from_env()?),
    })
}

impl EngineArgs {
    fn backend(&self) -> Result<Arc<dyn GenerationBackend>, CliError> {
        match self.backend {
            BackendKind::Remote => Ok(Arc::new(RemoteBackend::from_env()?)),
            BackendKind::Scripted if self.rules == "bundled" => Ok(Arc::new(fixtures::scripted_backend())),
            BackendKind::Scripted => Ok(Arc::new(ScriptedBackend::from_toml_str(&read_text(Path::new(
                &self.rules,
            ))?)?)),
        }
    }

    fn triggers(&self) -> Result<Vec<EventTrigger>, CliError> {
        if self.triggers == "bundled" {
            return Ok(fixtures::triggers());
        }
        serde_json::from_str(&read_text(Path::new(&self.triggers))?)
            .map_err(|e| CliError::domain("ParseError", format!("{}: {e}", self.triggers)))
    }

    fn library(&self) -> Result<KnowledgeLibrary, CliError> {
        let emb = embedder(self.embedder)?;
        if self.banks.is_empty() {
            if self.embedder == EmbedderKind::Hash {
                return Ok(fixtures::library());
            }
            return Ok(KnowledgeLibrary::from_documents(
                &fixtures::knowledge_documents(),
                emb,
                DEFAULT_CHUNK_SIZE,
                DEFAULT_CHUNK_OVERLAP,
            )?);
        }
        let mut lib = KnowledgeLibrary::new(emb.clone());
        for path in &self.banks {
            let bank = KnowledgeBank::from_file_str(&read_text(path)?)
                .map_err(|e| CliError::domain(e.code(), format!("{}: {e}", path.display())))?;
            if bank.embedder_id != emb.id() {
                return Err(CliError::domain(
                    "EmbedderMismatch",
                    format!("{}: bank embedded with `{}`, queries use `{}`", path.display(), bank.embedder_id, emb.id()),
                ));
            }
            if !bank.built {
                return Err(KnowledgeError::BankNotBuilt(bank.bank_id).into());
            }
            lib.insert(bank);
        }
        Ok(lib)
    }

    /// Run spec for `vocab` under the given flags.
    pub fn spec(&self, vocab: Vocabulary, flags: AblationFlags) -> Result<RunSpec, CliError> {
        Ok(RunSpec {
            vocab: Arc::new(vocab),
            backend: self.backend()?,
            library: Some(Arc::new(self.library()?)),
            triggers: self.triggers()?,
            policy: TurnPolicy::default(),
            config: SimConfig::with_flags(flags),
        })
    }
}

/// Logs go to stderr, filtered by `ORSIM_LOG` (default `warn`).
pub fn init_logging() {
    let filter = tracing_subscriber::EnvFilter::try_from_env("ORSIM_LOG")
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn"));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run(a) => commands::run(a),
        Command::Eval(a) => commands::eval(a),
        Command::Batch(a) => commands::batch(a),
        Command::Ingest(a) => commands::ingest(a),
        Command::GenCases(a) => commands::gen_cases(a),
        Command::Replay(a) => commands::replay(a),
        Command::Serve(a) => commands::serve(a),
        Command::Compact(a) => commands::compact(a),
    }
}
