//! Long-short memory of the copilot.
//!
//! [`ShortMemory`] holds what happened in the current operation and is
//! cleared and sealed at finalize. [`LongMemory`] is an append-only list of
//! case records, one per finalized simulation, each carrying its lessons.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{DiseaseLabel, PhaseId, PlanStep, RouteLabel, SurgicalCase};
use crate::eval::FailureKind;
use crate::knowledge::{cosine, HashEmbedder};
use crate::records;
use crate::workflow::SimulatedReport;

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("short memory is sealed; the owning simulation was finalized")]
    AppendAfterFinalize,
    #[error("entry tick {got} precedes last tick {last}")]
    TickRegression { last: u64, got: u64 },
    #[error("simulation `{0}` already has a case record")]
    DuplicateRecord(String),
    #[error("long memory file: {0}")]
    Io(String),
    #[error("long memory file: {0}")]
    Format(String),
}

impl MemoryError {
    pub fn code(&self) -> &'static str {
        match self {
            MemoryError::AppendAfterFinalize => "AppendAfterFinalize",
            MemoryError::TickRegression { .. } => "TickRegression",
            MemoryError::DuplicateRecord(_) => "DuplicateRecord",
            MemoryError::Io(_) => "IoError",
            MemoryError::Format(_) => "ParseError",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Utterance,
    Event,
    Vitals,
    Action,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub entry_id: String,
    pub tick: u64,
    pub phase: PhaseId,
    pub kind: EntryKind,
    pub text: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShortMemory {
    entries: Vec<MemoryEntry>,
    next_id: u64,
    sealed: bool,
}

impl ShortMemory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn append(
        &mut self,
        tick: u64,
        phase: PhaseId,
        kind: EntryKind,
        text: impl Into<String>,
    ) -> Result<String, MemoryError> {
        if self.sealed {
            return Err(MemoryError::AppendAfterFinalize);
        }
        if let Some(last) = self.entries.last() {
            if tick < last.tick {
                return Err(MemoryError::TickRegression {
                    last: last.tick,
                    got: tick,
                });
            }
        }
        let entry_id = format!("stm-{}", self.next_id);
        self.next_id += 1;
        self.entries.push(MemoryEntry {
            entry_id: entry_id.clone(),
            tick,
            phase,
            kind,
            text: text.into(),
        });
        Ok(entry_id)
    }

    /// Entries matching the filters, in tick order, limited to the last
    /// `last_n` matches.
    pub fn query(
        &self,
        phase: Option<PhaseId>,
        kind: Option<EntryKind>,
        last_n: Option<usize>,
    ) -> Vec<&MemoryEntry> {
        let matching: Vec<&MemoryEntry> = self
            .entries
            .iter()
            .filter(|e| phase.is_none_or(|p| e.phase == p))
            .filter(|e| kind.is_none_or(|k| e.kind == k))
            .collect();
        let skip = last_n.map_or(0, |n| matching.len().saturating_sub(n));
        matching.into_iter().skip(skip).collect()
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn contains_id(&self, id: &str) -> bool {
        self.entries.iter().any(|e| e.entry_id == id)
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    /// Clears and refuses further appends.
    pub fn seal(&mut self) {
        self.clear();
        self.sealed = true;
    }

    pub fn is_sealed(&self) -> bool {
        self.sealed
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "kind", rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Failure(FailureKind),
}

impl Outcome {
    pub fn from_failure(f: Option<FailureKind>) -> Outcome {
        f.map_or(Outcome::Success, Outcome::Failure)
    }

    pub fn is_failure(self) -> bool {
        matches!(self, Outcome::Failure(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lesson {
    pub lesson_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub record_id: String,
    pub sim_id: String,
    pub case_id: String,
    pub disease: DiseaseLabel,
    pub case_summary: String,
    #[serde(default)]
    pub chosen_route: Option<RouteLabel>,
    #[serde(default)]
    pub plan: Vec<PlanStep>,
    pub outcome: Outcome,
    #[serde(default)]
    pub fired_events: Vec<String>,
    #[serde(default)]
    pub lessons: Vec<Lesson>,
}

impl CaseRecord {
    /// An unnumbered record for a finalized report; ids are assigned when
    /// it is appended.
    pub fn draft(report: &SimulatedReport, case: &SurgicalCase, outcome: Outcome) -> CaseRecord {
        CaseRecord {
            record_id: String::new(),
            sim_id: report.sim_id.clone(),
            case_id: case.case_id.clone(),
            disease: case.disease_label.clone(),
            case_summary: case.summary(),
            chosen_route: report.chosen_route.clone(),
            plan: report.executed_plan.clone(),
            outcome,
            fired_events: report.fired_events.iter().map(|e| e.event_id.clone()).collect(),
            lessons: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedLesson {
    pub lesson_id: String,
    pub record_id: String,
    pub text: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LongMemory {
    records: Vec<CaseRecord>,
}

impl LongMemory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> &[CaseRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Assigns ids to a draft and its lessons without appending it.
    fn number(&self, mut draft: CaseRecord, lessons: Vec<String>) -> Result<CaseRecord, MemoryError> {
        if self.records.iter().any(|r| r.sim_id == draft.sim_id) {
            return Err(MemoryError::DuplicateRecord(draft.sim_id));
        }
        let record_id = format!("ltm-{:06}", self.records.len());
        draft.lessons = lessons
            .into_iter()
            .enumerate()
            .map(|(i, text)| Lesson {
                lesson_id: format!("{record_id}/l{i}"),
                text,
            })
            .collect();
        draft.record_id = record_id;
        Ok(draft)
    }

    pub fn record_case(&mut self, draft: CaseRecord, lessons: Vec<String>) -> Result<String, MemoryError> {
        let record = self.number(draft, lessons)?;
        let id = record.record_id.clone();
        self.records.push(record);
        Ok(id)
    }

    /// Lessons of the `m` records most similar to `case`, restricted to the
    /// same disease label. Records tie-break by id.
    pub fn retrieve_experience(&self, case: &SurgicalCase, m: usize) -> Vec<RetrievedLesson> {
        if m == 0 {
            return Vec::new();
        }
        let embedder = HashEmbedder::default();
        let query = embedder.embed_text(&case.summary());
        let mut scored: Vec<(f64, &CaseRecord)> = self
            .records
            .iter()
            .filter(|r| r.disease == case.disease_label)
            .map(|r| (cosine(&query, &embedder.embed_text(&r.case_summary)), r))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.record_id.cmp(&b.1.record_id)));
        scored
            .into_iter()
            .take(m)
            .flat_map(|(_, r)| {
                r.lessons.iter().map(move |l| RetrievedLesson {
                    lesson_id: l.lesson_id.clone(),
                    record_id: r.record_id.clone(),
                    text: l.text.clone(),
                })
            })
            .collect()
    }

    fn push_loaded(&mut self, record: CaseRecord) -> Result<(), MemoryError> {
        if self.records.iter().any(|r| r.sim_id == record.sim_id || r.record_id == record.record_id) {
            return Err(MemoryError::Format(format!(
                "duplicate record `{}` in file",
                record.record_id
            )));
        }
        self.records.push(record);
        Ok(())
    }
}

/// Long memory shared between simulations: concurrent readers, serialized
/// appends, optionally mirrored to an append-only file.
#[derive(Debug, Default)]
pub struct LongMemoryStore {
    memory: RwLock<LongMemory>,
    file: Mutex<Option<PathBuf>>,
}

impl LongMemoryStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or creates) a long-memory file and loads its records.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, MemoryError> {
        let path = path.as_ref();
        let memory = if path.exists() {
            let text = std::fs::read_to_string(path).map_err(|e| MemoryError::Io(e.to_string()))?;
            records::parse_long_memory(&text)?
        } else {
            let mut f = File::create(path).map_err(|e| MemoryError::Io(e.to_string()))?;
            f.write_all(records::long_memory_header().as_bytes())
                .and_then(|_| f.sync_all())
                .map_err(|e| MemoryError::Io(e.to_string()))?;
            LongMemory::new()
        };
        Ok(LongMemoryStore {
            memory: RwLock::new(memory),
            file: Mutex::new(Some(path.to_path_buf())),
        })
    }

    pub fn snapshot(&self) -> LongMemory {
        self.memory.read().expect("long memory lock").clone()
    }

    pub fn len(&self) -> usize {
        self.memory.read().expect("long memory lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn retrieve_experience(&self, case: &SurgicalCase, m: usize) -> Vec<RetrievedLesson> {
        self.memory
            .read()
            .expect("long memory lock")
            .retrieve_experience(case, m)
    }

    /// Appends one record. The file line is written before the in-memory
    /// list changes, so readers only ever observe whole records.
    pub fn record_case(&self, draft: CaseRecord, lessons: Vec<String>) -> Result<String, MemoryError> {
        let file = self.file.lock().expect("long memory file lock");
        let mut memory = self.memory.write().expect("long memory lock");
        let record = memory.number(draft, lessons)?;
        if let Some(path) = file.as_ref() {
            let mut f = OpenOptions::new()
                .append(true)
                .open(path)
                .map_err(|e| MemoryError::Io(e.to_string()))?;
            let line = records::long_memory_line(&record);
            f.write_all(line.as_bytes())
                .and_then(|_| f.sync_data())
                .map_err(|e| MemoryError::Io(e.to_string()))?;
        }
        let id = record.record_id.clone();
        memory.records.push(record);
        Ok(id)
    }

    pub fn path(&self) -> Option<PathBuf> {
        self.file.lock().expect("long memory file lock").clone()
    }
}

pub(crate) fn load_records(records: Vec<CaseRecord>) -> Result<LongMemory, MemoryError> {
    let mut mem = LongMemory::new();
    for r in records {
        mem.push_loaded(r)?;
    }
    Ok(mem)
}
