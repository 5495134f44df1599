//! Simulated surgery reports and their derivation from a transcript.
//!
//! A report is a pure function of the transcript header, the transcript
//! and the vocabulary. The engine builds its report through
//! [`derive_report`] and replay tooling calls the same function on a
//! transcript read back from disk.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::agent::directive::parse_action;
use crate::agent::persona::default_grammar;
use crate::domain::{
    Action, ActionKind, DiseaseLabel, Origin, PhaseId, PlanStep, RoleId, RouteLabel, Speaker,
    SubtaskId, Utterance,
};
use crate::eval::RunFingerprint;
use crate::vocab::Vocabulary;

pub const TRANSCRIPT_FORMAT: &str = "orsim-transcript";
pub const TRANSCRIPT_FORMAT_VERSION: &str = "1.0";
pub const REPORT_FORMAT_VERSION: &str = "1.0";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FiredEvent {
    pub event_id: String,
    pub phase: PhaseId,
    pub tick: u64,
    /// Transcript position of the announcing system utterance.
    pub seq: u64,
    pub priority: i32,
    pub payload: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub adds_subtasks: Vec<SubtaskId>,
}

/// First line of a transcript file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptHeader {
    pub format: String,
    pub format_version: String,
    pub sim_id: String,
    pub case_id: String,
    pub disease: DiseaseLabel,
    pub fingerprint: RunFingerprint,
    pub phase_budget: u32,
    pub aborted: bool,
    #[serde(default)]
    pub events: Vec<FiredEvent>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimStatus {
    Running,
    Finalized,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutedSubtask {
    pub seq: u64,
    pub phase: PhaseId,
    pub subtask_id: SubtaskId,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseCompletion {
    pub completed: Vec<SubtaskId>,
    pub remaining: Vec<SubtaskId>,
    /// Rotation turns spent in the phase.
    pub turns: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedReport {
    pub format_version: String,
    pub sim_id: String,
    pub case_id: String,
    pub disease: DiseaseLabel,
    pub status: SimStatus,
    pub aborted: bool,
    pub chosen_route: Option<RouteLabel>,
    pub proposed_plan: Vec<PlanStep>,
    pub executed_plan: Vec<PlanStep>,
    pub executed_subtasks: Vec<ExecutedSubtask>,
    pub phase_completion: BTreeMap<PhaseId, PhaseCompletion>,
    pub fired_events: Vec<FiredEvent>,
    pub outcome_summary: String,
    pub fingerprint: RunFingerprint,
    pub fingerprint_digest: String,
    #[serde(default)]
    pub warnings: Vec<String>,
    pub transcript: Vec<Utterance>,
}

impl SimulatedReport {
    /// Executed (phase, subtask) pairs in transcript order.
    pub fn executed_pairs(&self) -> Vec<(PhaseId, SubtaskId)> {
        self.executed_subtasks
            .iter()
            .map(|e| (e.phase, e.subtask_id.clone()))
            .collect()
    }

    pub fn header(&self, phase_budget: u32) -> TranscriptHeader {
        TranscriptHeader {
            format: TRANSCRIPT_FORMAT.to_string(),
            format_version: TRANSCRIPT_FORMAT_VERSION.to_string(),
            sim_id: self.sim_id.clone(),
            case_id: self.case_id.clone(),
            disease: self.disease.clone(),
            fingerprint: self.fingerprint.clone(),
            phase_budget,
            aborted: self.aborted,
            events: self.fired_events.clone(),
            warnings: self.warnings.clone(),
        }
    }
}

/// Agenda of a phase: contingency subtasks added by events first (in
/// firing order), then the plan's steps for the phase if the plan has
/// any, otherwise the taxonomy's base agenda for the route.
pub fn phase_agenda(
    vocab: &Vocabulary,
    phase: PhaseId,
    route: Option<&RouteLabel>,
    plan: Option<&[PlanStep]>,
    extras: &[SubtaskId],
) -> Vec<SubtaskId> {
    let mut out: Vec<SubtaskId> = Vec::new();
    for id in extras {
        if vocab.taxonomy.phase_of(id) == Some(phase) && !out.contains(id) {
            out.push(id.clone());
        }
    }
    let from_plan: Vec<SubtaskId> = plan
        .unwrap_or(&[])
        .iter()
        .filter(|s| s.canonical && s.phase == phase && vocab.taxonomy.phase_of(&s.step_id) == Some(phase))
        .map(|s| s.step_id.clone())
        .collect();
    let base = if from_plan.is_empty() {
        vocab.taxonomy.base_agenda(phase, route)
    } else {
        from_plan
    };
    for id in base {
        if !out.contains(&id) {
            out.push(id);
        }
    }
    out
}

/// Builds the report for a transcript.
pub fn derive_report(header: &TranscriptHeader, transcript: &[Utterance], vocab: &Vocabulary) -> SimulatedReport {
    let mut chosen_route = None;
    let mut proposed_plan: Vec<PlanStep> = Vec::new();
    let mut executed_subtasks = Vec::new();
    let mut turns: BTreeMap<PhaseId, u32> = BTreeMap::new();
    for u in transcript {
        match &u.action {
            Some(Action::SelectRoute(r)) => chosen_route = Some(r.clone()),
            Some(Action::ProposePlan(p)) => proposed_plan = p.clone(),
            Some(Action::CompleteSubtask(id)) => executed_subtasks.push(ExecutedSubtask {
                seq: u.seq,
                phase: u.phase,
                subtask_id: id.clone(),
            }),
            _ => {}
        }
        if is_rotation_turn(u) {
            *turns.entry(u.phase).or_default() += 1;
        }
    }

    let executed_plan: Vec<PlanStep> = executed_subtasks
        .iter()
        .filter(|e| e.phase == PhaseId::SurgicalOperation)
        .filter_map(|e| {
            proposed_plan
                .iter()
                .find(|s| s.step_id == e.subtask_id)
                .cloned()
                .or_else(|| vocab.taxonomy.plan_step(&e.subtask_id))
        })
        .collect();

    let plan = (!proposed_plan.is_empty()).then_some(proposed_plan.as_slice());
    let mut phase_completion = BTreeMap::new();
    for phase in PhaseId::ALL {
        let extras: Vec<SubtaskId> = header
            .events
            .iter()
            .filter(|e| e.phase == phase)
            .flat_map(|e| e.adds_subtasks.iter().cloned())
            .collect();
        let agenda = phase_agenda(vocab, phase, chosen_route.as_ref(), plan, &extras);
        let completed: Vec<SubtaskId> = executed_subtasks
            .iter()
            .filter(|e| e.phase == phase)
            .map(|e| e.subtask_id.clone())
            .collect();
        let done: BTreeSet<&SubtaskId> = completed.iter().collect();
        let remaining = agenda.into_iter().filter(|id| !done.contains(id)).collect();
        phase_completion.insert(
            phase,
            PhaseCompletion {
                completed,
                remaining,
                turns: turns.get(&phase).copied().unwrap_or(0),
            },
        );
    }

    let total_done: usize = phase_completion.values().map(|p| p.completed.len()).sum();
    let total_left: usize = phase_completion.values().map(|p| p.remaining.len()).sum();
    let events = if header.events.is_empty() {
        "none".to_string()
    } else {
        header.events.iter().map(|e| e.event_id.as_str()).collect::<Vec<_>>().join(", ")
    };
    let outcome_summary = format!(
        "{}; route {}; {} subtasks completed, {} left open; events: {}",
        if header.aborted { "aborted" } else { "completed" },
        chosen_route.as_ref().map_or("none", |r| r.as_str()),
        total_done,
        total_left,
        events
    );

    SimulatedReport {
        format_version: REPORT_FORMAT_VERSION.to_string(),
        sim_id: header.sim_id.clone(),
        case_id: header.case_id.clone(),
        disease: header.disease.clone(),
        status: if header.aborted { SimStatus::Aborted } else { SimStatus::Finalized },
        aborted: header.aborted,
        chosen_route,
        proposed_plan,
        executed_plan,
        executed_subtasks,
        phase_completion,
        fired_events: header.events.clone(),
        outcome_summary,
        fingerprint_digest: header.fingerprint.digest(),
        fingerprint: header.fingerprint.clone(),
        warnings: header.warnings.clone(),
        transcript: transcript.to_vec(),
    }
}

/// Turns that count against a phase budget: role utterances other than
/// the interleaved copilot.
pub fn is_rotation_turn(u: &Utterance) -> bool {
    matches!(u.speaker, Speaker::Role(r) if r != RoleId::SurgeryCopilot) && u.origin != Origin::System
}

/// Structural checks on a transcript read back from disk: gap-free
/// sequence numbers, monotone phases, one announcement per fired event,
/// and recorded route/subtask actions that agree with the directive in
/// the text.
pub fn verify_transcript(header: &TranscriptHeader, transcript: &[Utterance], vocab: &Vocabulary) -> Vec<String> {
    let mut problems = Vec::new();
    for (i, u) in transcript.iter().enumerate() {
        if u.seq != i as u64 {
            problems.push(format!("utterance {i} has seq {}", u.seq));
        }
    }
    for w in transcript.windows(2) {
        if w[1].phase < w[0].phase {
            problems.push(format!("phase goes backwards at seq {}", w[1].seq));
        }
        if w[1].tick < w[0].tick {
            problems.push(format!("tick goes backwards at seq {}", w[1].seq));
        }
    }
    for e in &header.events {
        let announced = transcript
            .iter()
            .filter(|u| u.speaker == Speaker::System && u.text.starts_with(&event_text_prefix(&e.event_id)))
            .count();
        if announced != 1 {
            problems.push(format!("event `{}` announced {announced} times", e.event_id));
        }
        match transcript.get(e.seq as usize) {
            Some(u) if u.speaker == Speaker::System && u.phase == e.phase => {}
            _ => problems.push(format!("event `{}` does not match seq {}", e.event_id, e.seq)),
        }
    }
    for u in transcript {
        let Speaker::Role(role) = u.speaker else {
            continue;
        };
        let parsed = parse_action(role, &u.text, &default_grammar(role), vocab).action;
        let tracked = |a: &Option<Action>| {
            matches!(
                a.as_ref().map(Action::kind),
                Some(ActionKind::CompleteSubtask | ActionKind::SelectRoute)
            )
        };
        // The engine may void a directive (recorded as no-op), but it
        // never invents or alters one.
        let voided = matches!(u.action, Some(Action::NoOp));
        if (tracked(&u.action) || (tracked(&parsed) && !voided)) && parsed != u.action {
            problems.push(format!("seq {}: recorded action does not match its text", u.seq));
        }
    }
    problems
}

pub fn event_text_prefix(event_id: &str) -> String {
    format!("EVENT {event_id}:")
}
