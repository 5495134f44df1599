//! On-disk formats: case files, corpus manifests, transcripts, reports,
//! long-memory files and knowledge documents.
//!
//! Every format carries a `format_version`; readers accept any minor
//! version of the major they know and reject the rest.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::copilot::memory::{load_records, CaseRecord, LongMemory, MemoryError};
use crate::domain::{canonicalize_route, validate_case, AliasTable, SurgicalCase, Utterance, Violation};
use crate::eval::EvalReport;
use crate::knowledge::Document;
use crate::vocab::{Taxonomy, Vocabulary};
use crate::workflow::report::{TranscriptHeader, TRANSCRIPT_FORMAT, TRANSCRIPT_FORMAT_VERSION};
use crate::workflow::SimulatedReport;

pub const CASE_FORMAT_VERSION: &str = "1.0";
pub const MANIFEST_FORMAT_VERSION: &str = "1.0";
pub const LONG_MEMORY_FORMAT: &str = "orsim-long-memory";
pub const LONG_MEMORY_FORMAT_VERSION: &str = "1.0";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unsupported format version `{found}` (this build reads {expected})")]
pub struct VersionError {
    pub found: String,
    pub expected: String,
}

/// Accepts `found` when its major version equals that of `expected`.
pub fn check_version(found: &str, expected: &str) -> Result<(), VersionError> {
    let major = |v: &str| v.trim().split('.').next().map(str::to_string).filter(|m| !m.is_empty());
    match (major(found), major(expected)) {
        (Some(a), Some(b)) if a == b && a.chars().all(|c| c.is_ascii_digit()) => Ok(()),
        _ => Err(VersionError {
            found: found.to_string(),
            expected: expected.to_string(),
        }),
    }
}

#[derive(Debug, Error)]
pub enum RecordsError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{path}: {locus}: {message}")]
    Parse { path: String, locus: String, message: String },
    #[error("{path}: invalid case: {}", .violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Validation { path: String, violations: Vec<Violation> },
    #[error("{path}: {source}")]
    Version { path: String, source: VersionError },
}

impl RecordsError {
    pub fn code(&self) -> &'static str {
        match self {
            RecordsError::Io { .. } => "IoError",
            RecordsError::Parse { .. } => "ParseError",
            RecordsError::Validation { .. } => "ValidationError",
            RecordsError::Version { .. } => "VersionError",
        }
    }

    fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        RecordsError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }

    fn json(path: &str, e: &serde_json::Error) -> Self {
        RecordsError::Parse {
            path: path.to_string(),
            locus: format!("line {} column {}", e.line(), e.column()),
            message: e.to_string(),
        }
    }
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, contents: &str) -> Result<(), RecordsError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| RecordsError::io(path, "not a file path"))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents.as_bytes())?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(RecordsError::io(path, e));
    }
    Ok(())
}

fn read(path: &Path) -> Result<String, RecordsError> {
    fs::read_to_string(path).map_err(|e| RecordsError::io(path, e))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CaseFile {
    format_version: String,
    /// Set on generated cases so they cannot pass for patient data.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    synthetic: bool,
    #[serde(flatten)]
    case: SurgicalCase,
}

/// Parses and validates a case document. Gold routes are canonicalized
/// through the vocabulary's alias table.
pub fn parse_case(text: &str, vocab: &Vocabulary, path: &str) -> Result<SurgicalCase, RecordsError> {
    let raw: serde_json::Value = serde_json::from_str(text).map_err(|e| RecordsError::json(path, &e))?;
    let version = raw
        .get("format_version")
        .and_then(|v| v.as_str())
        .ok_or_else(|| RecordsError::Parse {
            path: path.to_string(),
            locus: "format_version".into(),
            message: "missing format_version".into(),
        })?;
    check_version(version, CASE_FORMAT_VERSION).map_err(|source| RecordsError::Version {
        path: path.to_string(),
        source,
    })?;
    let file: CaseFile = serde_json::from_value(raw).map_err(|e| RecordsError::Parse {
        path: path.to_string(),
        locus: "case".into(),
        message: e.to_string(),
    })?;
    let mut case = file.case;
    if let Ok(r) = canonicalize_route(case.gold_route.as_str(), &vocab.route_aliases) {
        case.gold_route = r;
    }
    let violations = validate_case(&case, &vocab.taxonomy);
    if !violations.is_empty() {
        return Err(RecordsError::Validation {
            path: path.to_string(),
            violations,
        });
    }
    Ok(case)
}

pub fn case_to_string(case: &SurgicalCase, synthetic: bool) -> String {
    let file = CaseFile {
        format_version: CASE_FORMAT_VERSION.to_string(),
        synthetic,
        case: case.clone(),
    };
    let mut s = serde_json::to_string_pretty(&file).expect("case serializes");
    s.push('\n');
    s
}

pub fn load_case(path: &Path, vocab: &Vocabulary) -> Result<SurgicalCase, RecordsError> {
    parse_case(&read(path)?, vocab, &path.display().to_string())
}

pub fn save_case(path: &Path, case: &SurgicalCase, synthetic: bool) -> Result<(), RecordsError> {
    write_atomic(path, &case_to_string(case, synthetic))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format_version: String,
    pub corpus_id: String,
    #[serde(default)]
    pub synthetic: bool,
    /// Case file paths relative to the manifest.
    pub cases: Vec<String>,
    #[serde(default)]
    pub route_aliases: AliasTable,
    pub taxonomy: Taxonomy,
    #[serde(default)]
    pub disease_distribution: BTreeMap<String, usize>,
    #[serde(default)]
    pub route_distribution: BTreeMap<String, usize>,
}

impl CorpusManifest {
    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary {
            route_aliases: self.route_aliases.clone(),
            taxonomy: self.taxonomy.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub cases: Vec<SurgicalCase>,
}

impl Corpus {
    pub fn vocabulary(&self) -> Vocabulary {
        self.manifest.vocabulary()
    }

    pub fn get(&self, case_id: &str) -> Option<&SurgicalCase> {
        self.cases.iter().find(|c| c.case_id == case_id)
    }
}

/// Distribution summaries for a manifest.
pub fn distributions(cases: &[SurgicalCase]) -> (BTreeMap<String, usize>, BTreeMap<String, usize>) {
    let mut diseases = BTreeMap::new();
    let mut routes = BTreeMap::new();
    for c in cases {
        *diseases.entry(c.disease_label.code().to_string()).or_default() += 1;
        *routes.entry(c.gold_route.as_str().to_string()).or_default() += 1;
    }
    (diseases, routes)
}

/// Loads a corpus from a manifest file or a directory holding one.
pub fn load_corpus(path: &Path) -> Result<Corpus, RecordsError> {
    let manifest_path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let text = read(&manifest_path)?;
    let shown = manifest_path.display().to_string();
    let manifest: CorpusManifest = serde_json::from_str(&text).map_err(|e| RecordsError::json(&shown, &e))?;
    check_version(&manifest.format_version, MANIFEST_FORMAT_VERSION).map_err(|source| RecordsError::Version {
        path: shown.clone(),
        source,
    })?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let vocab = manifest.vocabulary();
    let mut cases = Vec::with_capacity(manifest.cases.len());
    let mut ids = std::collections::BTreeSet::new();
    for rel in &manifest.cases {
        let case = load_case(&base.join(rel), &vocab)?;
        if !ids.insert(case.case_id.clone()) {
            return Err(RecordsError::Validation {
                path: shown,
                violations: vec![Violation {
                    field: format!("cases[{}]", case.case_id),
                    rule: "case_id unique in corpus".into(),
                }],
            });
        }
        cases.push(case);
    }
    Ok(Corpus { manifest, cases })
}

/// Writes one file per case plus the manifest into `dir`. Returns the
/// manifest path.
pub fn write_corpus(
    dir: &Path,
    corpus_id: &str,
    cases: &[SurgicalCase],
    vocab: &Vocabulary,
    synthetic: bool,
) -> Result<PathBuf, RecordsError> {
    fs::create_dir_all(dir.join("cases")).map_err(|e| RecordsError::io(dir, e))?;
    let mut rels = Vec::with_capacity(cases.len());
    for c in cases {
        let rel = format!("cases/{}.json", c.case_id);
        save_case(&dir.join(&rel), c, synthetic)?;
        rels.push(rel);
    }
    let (disease_distribution, route_distribution) = distributions(cases);
    let manifest = CorpusManifest {
        format_version: MANIFEST_FORMAT_VERSION.to_string(),
        corpus_id: corpus_id.to_string(),
        synthetic,
        cases: rels,
        route_aliases: vocab.route_aliases.clone(),
        taxonomy: vocab.taxonomy.clone(),
        disease_distribution,
        route_distribution,
    };
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    write_atomic(&path, &text)?;
    Ok(path)
}

/// Transcript as line-delimited JSON: a header line, then one utterance
/// per line.
pub fn transcript_to_string(header: &TranscriptHeader, transcript: &[Utterance]) -> String {
    let mut s = serde_json::to_string(header).expect("header serializes");
    s.push('\n');
    for u in transcript {
        s.push_str(&serde_json::to_string(u).expect("utterance serializes"));
        s.push('\n');
    }
    s
}

pub fn parse_transcript(text: &str, path: &str) -> Result<(TranscriptHeader, Vec<Utterance>), RecordsError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines.next().ok_or_else(|| RecordsError::Parse {
        path: path.to_string(),
        locus: "line 1".into(),
        message: "empty transcript".into(),
    })?;
    let header: TranscriptHeader = serde_json::from_str(first).map_err(|e| RecordsError::Parse {
        path: path.to_string(),
        locus: "line 1 (header)".into(),
        message: e.to_string(),
    })?;
    if header.format != TRANSCRIPT_FORMAT {
        return Err(RecordsError::Parse {
            path: path.to_string(),
            locus: "line 1 (header)".into(),
            message: format!("not a transcript: format `{}`", header.format),
        });
    }
    check_version(&header.format_version, TRANSCRIPT_FORMAT_VERSION).map_err(|source| RecordsError::Version {
        path: path.to_string(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in lines {
        let u: Utterance = serde_json::from_str(line).map_err(|e| RecordsError::Parse {
            path: path.to_string(),
            locus: format!("line {}", i + 1),
            message: e.to_string(),
        })?;
        out.push(u);
    }
    Ok((header, out))
}

pub fn report_to_string(report: &SimulatedReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

pub fn parse_report(text: &str, path: &str) -> Result<SimulatedReport, RecordsError> {
    let raw: serde_json::Value = serde_json::from_str(text).map_err(|e| RecordsError::json(path, &e))?;
    let version = raw.get("format_version").and_then(|v| v.as_str()).unwrap_or("");
    check_version(version, crate::workflow::report::REPORT_FORMAT_VERSION).map_err(|source| {
        RecordsError::Version {
            path: path.to_string(),
            source,
        }
    })?;
    serde_json::from_value(raw).map_err(|e| RecordsError::Parse {
        path: path.to_string(),
        locus: "report".into(),
        message: e.to_string(),
    })
}

pub fn write_simulated_report(report: &SimulatedReport, path: &Path) -> Result<(), RecordsError> {
    write_atomic(path, &report_to_string(report))
}

pub fn read_simulated_report(path: &Path) -> Result<SimulatedReport, RecordsError> {
    parse_report(&read(path)?, &path.display().to_string())
}

pub fn eval_report_to_string(report: &EvalReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("eval report serializes");
    s.push('\n');
    s
}

pub fn parse_eval_report(text: &str, path: &str) -> Result<EvalReport, RecordsError> {
    let report: EvalReport = serde_json::from_str(text).map_err(|e| RecordsError::json(path, &e))?;
    check_version(&report.format_version, crate::eval::REPORT_FORMAT_VERSION).map_err(|source| {
        RecordsError::Version {
            path: path.to_string(),
            source,
        }
    })?;
    Ok(report)
}

#[derive(Debug, Serialize, Deserialize)]
struct LongMemoryHeader {
    format: String,
    format_version: String,
}

pub fn long_memory_header() -> String {
    let h = LongMemoryHeader {
        format: LONG_MEMORY_FORMAT.to_string(),
        format_version: LONG_MEMORY_FORMAT_VERSION.to_string(),
    };
    format!("{}\n", serde_json::to_string(&h).expect("header serializes"))
}

pub fn long_memory_line(record: &CaseRecord) -> String {
    format!("{}\n", serde_json::to_string(record).expect("record serializes"))
}

pub fn long_memory_to_string(mem: &LongMemory) -> String {
    let mut s = long_memory_header();
    for r in mem.records() {
        s.push_str(&long_memory_line(r));
    }
    s
}

pub fn parse_long_memory(text: &str) -> Result<LongMemory, MemoryError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let Some((_, first)) = lines.next() else {
        return Ok(LongMemory::new());
    };
    let header: LongMemoryHeader =
        serde_json::from_str(first).map_err(|e| MemoryError::Format(format!("line 1: {e}")))?;
    if header.format != LONG_MEMORY_FORMAT {
        return Err(MemoryError::Format(format!("line 1: unexpected format `{}`", header.format)));
    }
    check_version(&header.format_version, LONG_MEMORY_FORMAT_VERSION)
        .map_err(|e| MemoryError::Format(e.to_string()))?;
    let mut records = Vec::new();
    for (i, line) in lines {
        let r: CaseRecord =
            serde_json::from_str(line).map_err(|e| MemoryError::Format(format!("line {}: {e}", i + 1)))?;
        records.push(r);
    }
    load_records(records)
}

/// Rewrites a long-memory file with one record per line in the original
/// order, dropping blank lines. Returns the number of records.
pub fn compact_long_memory(path: &Path) -> Result<usize, MemoryError> {
    let text = fs::read_to_string(path).map_err(|e| MemoryError::Io(e.to_string()))?;
    let mem = parse_long_memory(&text)?;
    write_atomic(path, &long_memory_to_string(&mem)).map_err(|e| MemoryError::Io(e.to_string()))?;
    Ok(mem.len())
}

/// Reads every `.md` and `.txt` file under `dir` (sorted by path) as a
/// knowledge document.
pub fn load_documents(dir: &Path) -> Result<Vec<Document>, RecordsError> {
    let mut paths = Vec::new();
    collect_files(dir, &mut paths)?;
    paths.sort();
    let mut docs = Vec::new();
    for p in paths {
        let text = read(&p)?;
        let stem = p.file_stem().map(|s| s.to_string_lossy().to_string()).unwrap_or_default();
        let doc = Document::parse(&text, &stem).map_err(|e| RecordsError::Parse {
            path: p.display().to_string(),
            locus: "front matter".into(),
            message: e.to_string(),
        })?;
        docs.push(doc);
    }
    Ok(docs)
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), RecordsError> {
    let entries = fs::read_dir(dir).map_err(|e| RecordsError::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| RecordsError::io(dir, e))?;
        let p = entry.path();
        if p.is_dir() {
            collect_files(&p, out)?;
        } else if matches!(p.extension().and_then(|e| e.to_str()), Some("md" | "txt")) {
            out.push(p);
        }
    }
    Ok(())
}
