//! Bundled fixture corpus: vocabulary, scripted rule table, event
//! triggers, knowledge documents and one reference case. Embedded at
//! compile time so the library, the CLI and the browser demo all run
//! offline with the same data.

use std::sync::Arc;

use crate::agent::backend::ScriptedBackend;
use crate::domain::{
    canonicalize_route, EventTrigger, Origin, PhaseId, RoleId, Speaker, SubtaskId, SurgicalCase, Utterance,
};
use crate::eval::FailureKind;
use crate::knowledge::{Document, HashEmbedder, KnowledgeLibrary, DEFAULT_CHUNK_OVERLAP, DEFAULT_CHUNK_SIZE};
use crate::records::parse_case;
use crate::runner::RunSpec;
use crate::workflow::report::FiredEvent;
use crate::workflow::{SimConfig, SimulatedReport};
use crate::vocab::Vocabulary;

pub const VOCABULARY_JSON: &str = include_str!("../fixtures/vocabulary.json");
pub const RULES_TOML: &str = include_str!("../fixtures/rules.toml");
pub const TRIGGERS_JSON: &str = include_str!("../fixtures/triggers.json");
pub const CASE01_JSON: &str = include_str!("../fixtures/case01.json");
/// Ten hand-labeled route predictions with their expected scores.
pub const ROUTE_LABELS_JSON: &str = include_str!("../fixtures/eval/route_labels.json");

/// Knowledge documents as `(path relative to fixtures/knowledge, text)`.
pub const KNOWLEDGE_DOCS: [(&str, &str); 9] = [
    ("anesthetist/airway_and_induction.md", include_str!("../fixtures/knowledge/anesthetist/airway_and_induction.md")),
    ("anesthetist/emergence.md", include_str!("../fixtures/knowledge/anesthetist/emergence.md")),
    ("chief_surgeon/craniotomy_steps.md", include_str!("../fixtures/knowledge/chief_surgeon/craniotomy_steps.md")),
    ("chief_surgeon/transsphenoidal_steps.md", include_str!("../fixtures/knowledge/chief_surgeon/transsphenoidal_steps.md")),
    ("nursing/perioperative_nursing.md", include_str!("../fixtures/knowledge/nursing/perioperative_nursing.md")),
    ("surgery_copilot/intraoperative_events.md", include_str!("../fixtures/knowledge/surgery_copilot/intraoperative_events.md")),
    ("surgery_copilot/invasion_grading.md", include_str!("../fixtures/knowledge/surgery_copilot/invasion_grading.md")),
    ("surgery_copilot/reconstruction.md", include_str!("../fixtures/knowledge/surgery_copilot/reconstruction.md")),
    ("surgery_copilot/route_selection.md", include_str!("../fixtures/knowledge/surgery_copilot/route_selection.md")),
];

pub fn vocabulary() -> Vocabulary {
    serde_json::from_str(VOCABULARY_JSON).expect("bundled vocabulary parses")
}

pub fn triggers() -> Vec<EventTrigger> {
    serde_json::from_str(TRIGGERS_JSON).expect("bundled triggers parse")
}

pub fn scripted_backend() -> ScriptedBackend {
    ScriptedBackend::from_toml_str(RULES_TOML).expect("bundled rule table is valid")
}

pub fn knowledge_documents() -> Vec<Document> {
    KNOWLEDGE_DOCS
        .iter()
        .map(|(path, text)| {
            let stem = path.rsplit('/').next().unwrap_or(path).trim_end_matches(".md");
            Document::parse(text, stem).expect("bundled document parses")
        })
        .collect()
}

/// One bank per role binding, built with the default hash embedder.
pub fn library() -> KnowledgeLibrary {
    KnowledgeLibrary::from_documents(
        &knowledge_documents(),
        Arc::new(HashEmbedder::default()),
        DEFAULT_CHUNK_SIZE,
        DEFAULT_CHUNK_OVERLAP,
    )
    .expect("bundled knowledge builds")
}

pub fn case01() -> SurgicalCase {
    parse_case(CASE01_JSON, &vocabulary(), "fixtures/case01.json").expect("bundled case parses")
}

/// The reference case with an eight-subtask gold set, and a run that
/// executed exactly the first four of them in order.
pub fn half_executed() -> (SurgicalCase, Vec<(PhaseId, SubtaskId)>) {
    let mut case = case01();
    let ids = |xs: &[&str]| xs.iter().map(|s| SubtaskId::new(*s)).collect::<Vec<_>>();
    case.gold_subtasks.clear();
    case.gold_subtasks.insert(
        PhaseId::PatientTransfer,
        ids(&["transfer.identity_check", "transfer.consent_verify", "transfer.move_to_table"]),
    );
    case.gold_subtasks.insert(
        PhaseId::Anesthesia,
        ids(&["anesth.preop_assessment", "anesth.induction", "anesth.intubation", "anesth.lines_monitoring"]),
    );
    case.gold_subtasks.insert(PhaseId::Preparation, ids(&["prep.positioning"]));
    let executed = case.flattened_gold().into_iter().take(4).collect();
    (case, executed)
}

/// The seed-7 reference run, altered so that exactly one failure rule
/// fires. Returns the intended kind, the altered report and the case.
pub fn failure_fixtures() -> Vec<(FailureKind, SimulatedReport, SurgicalCase)> {
    let case = case01();
    let base = RunSpec::fixture(SimConfig::default())
        .simulate(&case, 7, Some("failure-fixture".into()), None)
        .expect("reference run completes")
        .report;

    let mut misjudged = base.clone();
    misjudged.chosen_route = Some(canonicalize_route("craniotomy", &vocabulary().route_aliases).expect("alias"));

    let mut overload = base.clone();
    let keep = overload.executed_subtasks.len() / 2;
    overload.executed_subtasks.truncate(keep);
    for (i, (id, tick)) in [("csf_leak", 100), ("hemorrhage", 101)].into_iter().enumerate() {
        overload.fired_events.push(FiredEvent {
            event_id: id.into(),
            phase: PhaseId::SurgicalOperation,
            tick,
            seq: 10_000 + i as u64,
            priority: 5,
            payload: format!("{id} during resection"),
            adds_subtasks: Vec::new(),
        });
    }

    let mut hallucination = base;
    let last = hallucination.transcript.last().expect("non-empty transcript").clone();
    hallucination.transcript.push(Utterance {
        seq: last.seq + 1,
        tick: last.tick + 1,
        phase: last.phase,
        speaker: Speaker::Role(RoleId::ChiefSurgeon),
        text: "In hindsight this behaved like a chordoma.".into(),
        action: None,
        origin: Origin::Agent,
    });

    vec![
        (FailureKind::MisjudgedInitialApproach, misjudged, case.clone()),
        (FailureKind::MultiSituationOverload, overload, case.clone()),
        (FailureKind::RareDiseaseHallucination, hallucination, case),
    ]
}
