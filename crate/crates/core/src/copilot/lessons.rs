//! Lesson extraction from finalized case records.

use crate::agent::backend::{GenerationBackend, GenerationParams, GenerationRequest, Message, MessageTag};
use crate::domain::{PhaseId, RoleId};

use super::memory::{CaseRecord, Outcome};

fn outcome_text(outcome: Outcome) -> String {
    match outcome {
        Outcome::Success => "success".to_string(),
        Outcome::Failure(kind) => format!("failure ({kind})"),
    }
}

/// Deterministic lessons: one per record unless it was a clean success.
pub fn template_lessons(record: &CaseRecord) -> Vec<String> {
    if !record.outcome.is_failure() && record.fired_events.is_empty() {
        return Vec::new();
    }
    let route = record
        .chosen_route
        .as_ref()
        .map(|r| r.as_str().to_string())
        .unwrap_or_else(|| "none".to_string());
    let watch = if record.fired_events.is_empty() {
        "no intraoperative events".to_string()
    } else {
        record.fired_events.join(", ")
    };
    vec![format!(
        "For {}, route {} led to {}; watch for {}",
        record.disease.name(),
        route,
        outcome_text(record.outcome),
        watch
    )]
}

/// Lessons for `record`. With a backend the record is summarized by the
/// model, one lesson per non-empty reply line; failures and empty replies
/// fall back to the template so failure records always carry a lesson.
pub fn extract_lessons(record: &CaseRecord, backend: Option<&dyn GenerationBackend>) -> Vec<String> {
    let Some(backend) = backend else {
        return template_lessons(record);
    };
    let plan: Vec<&str> = record.plan.iter().map(|s| s.step_id.as_str()).collect();
    let body = format!(
        "## Task\nTask: extract lessons\nDisease: {}\nRoute: {}\nOutcome: {}\nEvents: {}\nExecuted plan: {}\n\
         Reply with one short lesson per line.",
        record.disease.name(),
        record.chosen_route.as_ref().map_or("none", |r| r.as_str()),
        outcome_text(record.outcome),
        if record.fired_events.is_empty() { "none".to_string() } else { record.fired_events.join(", ") },
        plan.join(", ")
    );
    let req = GenerationRequest {
        role: RoleId::SurgeryCopilot,
        phase: PhaseId::PostoperativeCare,
        messages: vec![
            Message::new(MessageTag::System, "You summarize finished operations into reusable lessons."),
            Message::new(MessageTag::RoleContext, format!("## Case\n{}", record.case_summary)),
            Message::new(MessageTag::RoleContext, body),
        ],
        params: GenerationParams::default(),
        vars: Default::default(),
    };
    let lessons: Vec<String> = match backend.generate(&req) {
        Ok(text) => text
            .lines()
            .map(|l| l.trim().trim_start_matches(['-', '*']).trim())
            .filter(|l| !l.is_empty() && !l.starts_with("[[ACTION"))
            .map(str::to_string)
            .collect(),
        Err(_) => Vec::new(),
    };
    if lessons.is_empty() && record.outcome.is_failure() {
        return template_lessons(record);
    }
    lessons
}
