//! The surgery copilot: route selection, plan drafting, stage guidance and
//! question answering, backed by short and long memory.

pub mod lessons;
pub mod memory;

pub use lessons::{extract_lessons, template_lessons};
pub use memory::{
    CaseRecord, EntryKind, Lesson, LongMemory, LongMemoryStore, MemoryEntry, MemoryError, Outcome,
    RetrievedLesson, ShortMemory,
};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::backend::{
    BackendError, GenerationBackend, GenerationParams, GenerationRequest, Message, MessageTag,
};
use crate::agent::directive::parse_action;
use crate::agent::persona::RolePersona;
use crate::agent::prompt::{KnowledgeRef, TurnView};
use crate::domain::{normalize_text, Action, PhaseId, PlanStep, RoleId, RouteLabel, SubtaskId, SurgicalCase};
use crate::knowledge::{Embedder, KnowledgeBank};
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CopilotError {
    #[error("no select_route directive after one reprompt")]
    NoRouteEmitted,
    #[error("plan reply contained no numbered steps")]
    EmptyPlan,
    #[error(transparent)]
    Backend(#[from] BackendError),
}

impl CopilotError {
    pub fn code(&self) -> &'static str {
        match self {
            CopilotError::NoRouteEmitted => "NoRouteEmitted",
            CopilotError::EmptyPlan => "EmptyPlan",
            CopilotError::Backend(_) => "BackendFailure",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CopilotConfig {
    pub top_k: usize,
    /// Records whose lessons are offered during planning.
    pub top_m: usize,
    /// Adds a reason-then-act scaffold to planning prompts.
    pub react: bool,
    pub max_length: usize,
}

impl Default for CopilotConfig {
    fn default() -> Self {
        CopilotConfig {
            top_k: 3,
            top_m: 3,
            react: false,
            max_length: 24_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Info,
    Warning,
    Critical,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alert {
    pub severity: Severity,
    pub text: String,
    pub sources: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Guidance {
    pub phase: PhaseId,
    pub recommendations: Vec<String>,
    pub alerts: Vec<Alert>,
    pub cited_sources: Vec<String>,
    #[serde(default)]
    pub degraded: bool,
}

impl Guidance {
    /// Highest-severity alert at or above warning, if any.
    pub fn top_alert(&self) -> Option<&Alert> {
        self.alerts
            .iter()
            .filter(|a| a.severity >= Severity::Warning)
            .max_by(|a, b| a.severity.cmp(&b.severity).then(b.text.cmp(&a.text)))
    }

    pub fn render(&self) -> String {
        let mut s = format!("Guidance for {}:", self.phase.display_name());
        for r in &self.recommendations {
            s.push_str(&format!("\n- {r}"));
        }
        for a in &self.alerts {
            let sev = match a.severity {
                Severity::Info => "info",
                Severity::Warning => "warning",
                Severity::Critical => "critical",
            };
            s.push_str(&format!("\n[{sev}] {} (sources: {})", a.text, a.sources.join(", ")));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteDecision {
    pub route: RouteLabel,
    pub reply: String,
    pub reprompted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CopilotAnswer {
    pub question: String,
    pub answer: String,
    pub phase: PhaseId,
    pub cited_sources: Vec<String>,
    pub post_op: bool,
    #[serde(default)]
    pub degraded: bool,
}

/// A memory line offered to question answering: source id and text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemoryLine {
    pub id: String,
    pub text: String,
}

/// Borrowed resources for copilot calls. `bank` is `None` when retrieval
/// is disabled.
#[derive(Clone, Copy)]
pub struct Copilot<'a> {
    pub persona: &'a RolePersona,
    pub bank: Option<&'a KnowledgeBank>,
    pub embedder: &'a dyn Embedder,
    pub backend: &'a dyn GenerationBackend,
    pub vocab: &'a Vocabulary,
    pub cfg: CopilotConfig,
}

pub const TASK_SELECT_ROUTE: &str = "Task: select surgical route";
pub const TASK_GENERATE_PLAN: &str = "Task: generate surgical plan";
pub const TASK_STAGE_GUIDANCE: &str = "Task: stage guidance";
pub const TASK_ANSWER_QUESTION: &str = "Task: answer question";
const REACT_SCAFFOLD: &str =
    "Work in Thought / Action / Observation steps, then give the final answer.";

fn knowledge_block(knowledge: &[KnowledgeRef]) -> Option<String> {
    if knowledge.is_empty() {
        return None;
    }
    let mut s = String::from("## Retrieved knowledge\n");
    for k in knowledge {
        s.push_str(&format!("[{}] {}\n", k.chunk_id, k.text.replace('\n', " ")));
    }
    Some(s)
}

fn lessons_block(lessons: &[RetrievedLesson]) -> Option<String> {
    if lessons.is_empty() {
        return None;
    }
    let mut s = String::from("## Lessons from past cases\n");
    for l in lessons {
        s.push_str(&format!("[{}] {}\n", l.lesson_id, l.text));
    }
    Some(s)
}

/// Messages of a route-selection prompt. Lessons occupy their own message
/// so their presence changes nothing else.
pub fn route_messages(
    persona: &RolePersona,
    case: &SurgicalCase,
    knowledge: &[KnowledgeRef],
    lessons: &[RetrievedLesson],
    routes: &[&str],
    react: bool,
) -> Vec<Message> {
    let mut out = vec![
        Message::new(MessageTag::System, persona.persona_text.clone()),
        Message::new(MessageTag::RoleContext, format!("## Case\n{}", case.summary())),
    ];
    if let Some(k) = knowledge_block(knowledge) {
        out.push(Message::new(MessageTag::RoleContext, k));
    }
    if let Some(l) = lessons_block(lessons) {
        out.push(Message::new(MessageTag::RoleContext, l));
    }
    let mut task = format!(
        "## Task\n{TASK_SELECT_ROUTE}\nKnown routes: {}\nReply with one line [[ACTION: select_route=<route>]].",
        routes.join("; ")
    );
    if react {
        task.push('\n');
        task.push_str(REACT_SCAFFOLD);
    }
    out.push(Message::new(MessageTag::RoleContext, task));
    out
}

/// Parses the numbered lines of a plan reply (`1.` or `1)`), mapping each
/// onto the taxonomy. Mapped steps take the taxonomy description;
/// unmapped steps get a `custom.<slug>` id and are flagged non-canonical.
/// Repeated ids are dropped.
pub fn parse_plan_reply(text: &str, vocab: &Vocabulary) -> Vec<PlanStep> {
    let mut steps: Vec<PlanStep> = Vec::new();
    let mut seen = BTreeSet::new();
    let mut last_phase = PhaseId::SurgicalOperation;
    for line in text.lines() {
        let Some(body) = numbered_body(line) else {
            continue;
        };
        let step = match vocab.taxonomy.match_step(body).and_then(|id| vocab.taxonomy.plan_step(&id)) {
            Some(step) => {
                last_phase = step.phase;
                step
            }
            None => {
                let slug = slugify(body);
                if slug.is_empty() {
                    continue;
                }
                PlanStep {
                    step_id: SubtaskId(format!("custom.{slug}")),
                    description: body.to_string(),
                    phase: last_phase,
                    canonical: false,
                }
            }
        };
        if seen.insert(step.step_id.clone()) {
            steps.push(step);
        }
    }
    steps
}

fn numbered_body(line: &str) -> Option<&str> {
    let t = line.trim_start();
    let digits = t.chars().take_while(char::is_ascii_digit).count();
    if digits == 0 {
        return None;
    }
    let rest = &t[digits..];
    let rest = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')'))?;
    if !rest.starts_with(char::is_whitespace) {
        return None;
    }
    let body = rest.trim();
    (!body.is_empty()).then_some(body)
}

fn slugify(text: &str) -> String {
    let mut slug = String::new();
    for word in normalize_text(text).split(|c: char| !c.is_ascii_alphanumeric()).filter(|w| !w.is_empty()) {
        if !slug.is_empty() {
            slug.push('_');
        }
        slug.push_str(word);
        if slug.len() >= 40 {
            break;
        }
    }
    slug
}

/// Renders a plan as the numbered list [`parse_plan_reply`] accepts.
pub fn render_plan(steps: &[PlanStep]) -> String {
    steps
        .iter()
        .enumerate()
        .map(|(i, s)| format!("{}. {}\n", i + 1, s.description))
        .collect()
}

impl<'a> Copilot<'a> {
    fn retrieve(&self, query: &str) -> Vec<KnowledgeRef> {
        let Some(bank) = self.bank else {
            return Vec::new();
        };
        if self.cfg.top_k == 0 || !bank.built || query.trim().is_empty() {
            return Vec::new();
        }
        bank.retrieve_top_k(query, self.cfg.top_k, self.embedder)
            .unwrap_or_default()
            .into_iter()
            .map(|s| KnowledgeRef {
                chunk_id: s.chunk.chunk_id,
                bank_id: bank.bank_id.clone(),
                text: s.chunk.text,
                score: s.score,
            })
            .collect()
    }

    fn request(&self, phase: PhaseId, messages: Vec<Message>, vars: BTreeMap<String, String>, seed: u64) -> GenerationRequest {
        GenerationRequest {
            role: RoleId::SurgeryCopilot,
            phase,
            messages,
            params: GenerationParams {
                max_length: self.cfg.max_length,
                temperature: 0.0,
                seed,
            },
            vars,
        }
    }

    fn vars(&self, case: &SurgicalCase, phase: PhaseId) -> BTreeMap<String, String> {
        let role = RoleId::SurgeryCopilot;
        let mut v = BTreeMap::new();
        v.insert("role".into(), role.as_str().to_string());
        v.insert("role_name".into(), role.display_name().to_string());
        v.insert("phase".into(), phase.as_str().to_string());
        v.insert("phase_name".into(), phase.display_name().to_string());
        v.insert("case_id".into(), case.case_id.clone());
        v
    }

    /// Knowledge offered for route selection on `case`.
    pub fn route_knowledge(&self, case: &SurgicalCase) -> Vec<KnowledgeRef> {
        self.retrieve(&case.summary())
    }

    pub fn select_route(
        &self,
        case: &SurgicalCase,
        lessons: &[RetrievedLesson],
        phase: PhaseId,
        seed: u64,
    ) -> Result<RouteDecision, CopilotError> {
        let routes: Vec<&str> = self.vocab.route_aliases.canonical_values().into_iter().collect();
        let knowledge = self.route_knowledge(case);
        let mut messages = route_messages(self.persona, case, &knowledge, lessons, &routes, self.cfg.react);
        let vars = self.vars(case, phase);
        for attempt in 0..2 {
            let reply = self.backend.generate(&self.request(phase, messages.clone(), vars.clone(), seed))?;
            let parsed = parse_action(RoleId::SurgeryCopilot, &reply, &self.persona.action_grammar, self.vocab);
            if let Some(Action::SelectRoute(route)) = parsed.action {
                return Ok(RouteDecision {
                    route,
                    reply,
                    reprompted: attempt > 0,
                });
            }
            messages.push(Message::new(MessageTag::Dialogue, format!("[copilot] {reply}")));
            messages.push(Message::new(
                MessageTag::RoleContext,
                "Your previous reply had no select_route directive. Reply again with exactly one \
                 [[ACTION: select_route=<route>]] line.",
            ));
        }
        Err(CopilotError::NoRouteEmitted)
    }

    pub fn plan_messages(
        &self,
        case: &SurgicalCase,
        route: &RouteLabel,
        lessons: &[RetrievedLesson],
    ) -> Vec<Message> {
        let mut out = vec![
            Message::new(MessageTag::System, self.persona.persona_text.clone()),
            Message::new(MessageTag::RoleContext, format!("## Case\n{}", case.summary())),
        ];
        let knowledge = self.retrieve(&format!("{} {}", route.as_str(), case.summary()));
        if let Some(k) = knowledge_block(&knowledge) {
            out.push(Message::new(MessageTag::RoleContext, k));
        }
        if let Some(l) = lessons_block(lessons) {
            out.push(Message::new(MessageTag::RoleContext, l));
        }
        let mut task = format!(
            "## Task\n{TASK_GENERATE_PLAN}\nRoute: {}\nReply with the operative steps as a numbered list, one step per line.",
            route.as_str()
        );
        if self.cfg.react {
            task.push('\n');
            task.push_str(REACT_SCAFFOLD);
        }
        out.push(Message::new(MessageTag::RoleContext, task));
        out
    }

    pub fn generate_plan(
        &self,
        case: &SurgicalCase,
        route: &RouteLabel,
        lessons: &[RetrievedLesson],
        phase: PhaseId,
        seed: u64,
    ) -> Result<Vec<PlanStep>, CopilotError> {
        let mut vars = self.vars(case, phase);
        vars.insert("route".into(), route.as_str().to_string());
        let req = self.request(phase, self.plan_messages(case, route, lessons), vars, seed);
        let reply = self.backend.generate(&req)?;
        let steps = parse_plan_reply(&reply, self.vocab);
        if steps.is_empty() {
            return Err(CopilotError::EmptyPlan);
        }
        Ok(steps)
    }

    /// Guidance for the current phase. Never fails: a backend error yields
    /// empty recommendations and an info alert.
    pub fn guide_stage(
        &self,
        view: &TurnView<'_>,
        short: &ShortMemory,
        lessons: &[RetrievedLesson],
        seed: u64,
    ) -> Guidance {
        let phase = view.phase;
        let remaining: Vec<&str> = view.agenda.iter().filter(|a| !a.done).map(|a| a.id.as_str()).collect();
        let mut cited: BTreeSet<String> = BTreeSet::new();
        let mut alerts = Vec::new();

        for ev in view.active_events {
            let entry = short
                .query(Some(phase), Some(EntryKind::Event), None)
                .into_iter()
                .rev()
                .find(|e| e.text.starts_with(&format!("{}:", ev.event_id)))
                .or_else(|| short.entries().last());
            let Some(entry) = entry else {
                continue;
            };
            alerts.push(Alert {
                severity: if ev.priority >= 8 { Severity::Critical } else { Severity::Warning },
                text: format!("{}: {}", ev.event_id, ev.payload),
                sources: vec![entry.entry_id.clone()],
            });
        }

        let mut query = view.next_subtask().map(|a| a.description.clone()).unwrap_or_default();
        for ev in view.active_events {
            query.push(' ');
            query.push_str(&ev.payload);
        }
        let knowledge = self.retrieve(&query);

        let recent = short.query(None, None, Some(8));
        let mut messages = vec![
            Message::new(MessageTag::System, self.persona.persona_text.clone()),
            Message::new(
                MessageTag::RoleContext,
                format!(
                    "## Phase\n{} ({})\nRemaining subtasks: {}",
                    phase,
                    phase.display_name(),
                    if remaining.is_empty() { "none".to_string() } else { remaining.join(", ") }
                ),
            ),
        ];
        if !recent.is_empty() {
            let mut s = String::from("## Recent memory\n");
            for e in &recent {
                s.push_str(&format!("[{}] tick {} {:?}: {}\n", e.entry_id, e.tick, e.kind, e.text));
            }
            messages.push(Message::new(MessageTag::RoleContext, s));
        }
        if let Some(k) = knowledge_block(&knowledge) {
            messages.push(Message::new(MessageTag::RoleContext, k));
        }
        if let Some(l) = lessons_block(lessons) {
            messages.push(Message::new(MessageTag::RoleContext, l));
        }
        messages.push(Message::new(
            MessageTag::RoleContext,
            format!("## Task\n{TASK_STAGE_GUIDANCE}\nGive short recommendations for the team, one per line."),
        ));
        let mut vars = self.vars(view.case, phase);
        vars.insert("route".into(), view.selected_route.map(|r| r.as_str().to_string()).unwrap_or_default());
        vars.insert("remaining".into(), remaining.join(", "));
        vars.insert(
            "next_subtask_desc".into(),
            view.next_subtask().map(|a| a.description.clone()).unwrap_or_default(),
        );

        match self.backend.generate(&self.request(phase, messages, vars, seed)) {
            Ok(reply) => {
                let mut recommendations = vec![if remaining.is_empty() {
                    format!("All {} subtasks are complete", phase.as_str())
                } else {
                    format!("Remaining in {}: {}", phase.as_str(), remaining.join(", "))
                }];
                recommendations.extend(
                    reply
                        .lines()
                        .map(|l| l.trim().trim_start_matches("- ").trim())
                        .filter(|l| !l.is_empty() && !l.starts_with("[[ACTION"))
                        .map(str::to_string),
                );
                cited.extend(knowledge.iter().map(|k| k.chunk_id.clone()));
                cited.extend(lessons.iter().map(|l| l.lesson_id.clone()));
                cited.extend(alerts.iter().flat_map(|a| a.sources.clone()));
                Guidance {
                    phase,
                    recommendations,
                    alerts,
                    cited_sources: cited.into_iter().collect(),
                    degraded: false,
                }
            }
            Err(err) => {
                if let Some(last) = short.entries().last() {
                    alerts.push(Alert {
                        severity: Severity::Info,
                        text: format!("Copilot guidance degraded: {err}"),
                        sources: vec![last.entry_id.clone()],
                    });
                }
                cited.extend(alerts.iter().flat_map(|a| a.sources.clone()));
                Guidance {
                    phase,
                    recommendations: Vec::new(),
                    alerts,
                    cited_sources: cited.into_iter().collect(),
                    degraded: true,
                }
            }
        }
    }

    /// Answers a free-text question. Reads only; the caller's state is
    /// untouched.
    pub fn answer(
        &self,
        question: &str,
        case: &SurgicalCase,
        phase: PhaseId,
        memory: &[MemoryLine],
        post_op: bool,
        seed: u64,
    ) -> CopilotAnswer {
        let knowledge = self.retrieve(question);
        let recent = &memory[memory.len().saturating_sub(12)..];
        let mut messages = vec![
            Message::new(MessageTag::System, self.persona.persona_text.clone()),
            Message::new(
                MessageTag::RoleContext,
                format!("## Phase\n{} ({})\n## Case\n{}", phase, phase.display_name(), case.summary()),
            ),
        ];
        if !recent.is_empty() {
            let mut s = String::from(if post_op { "## Transcript\n" } else { "## Recent memory\n" });
            for m in recent {
                s.push_str(&format!("[{}] {}\n", m.id, m.text));
            }
            messages.push(Message::new(MessageTag::RoleContext, s));
        }
        if let Some(k) = knowledge_block(&knowledge) {
            messages.push(Message::new(MessageTag::RoleContext, k));
        }
        messages.push(Message::new(
            MessageTag::RoleContext,
            format!("## Task\n{TASK_ANSWER_QUESTION}\nQuestion: {question}"),
        ));
        let mut vars = self.vars(case, phase);
        vars.insert("question".into(), question.to_string());
        let mut cited: Vec<String> = recent.iter().map(|m| m.id.clone()).collect();
        cited.extend(knowledge.iter().map(|k| k.chunk_id.clone()));
        match self.backend.generate(&self.request(phase, messages, vars, seed)) {
            Ok(answer) => CopilotAnswer {
                question: question.to_string(),
                answer,
                phase,
                cited_sources: cited,
                post_op,
                degraded: false,
            },
            Err(err) => CopilotAnswer {
                question: question.to_string(),
                answer: format!("The copilot is unavailable ({err}). Current phase: {}.", phase.display_name()),
                phase,
                cited_sources: Vec::new(),
                post_op,
                degraded: true,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    #[test]
    fn numbered_lines_accept_dot_and_paren() {
        assert_eq!(numbered_body("1. Open"), Some("Open"));
        assert_eq!(numbered_body("  12) Close it "), Some("Close it"));
        assert_eq!(numbered_body("1.5 mm"), None);
        assert_eq!(numbered_body("Step 1. x"), None);
    }

    #[test]
    fn unknown_step_is_flagged_non_canonical() {
        let vocab = fixtures::vocabulary();
        let steps = parse_plan_reply(
            "1. Sphenoidotomy\n2. Sing to the patient\n3. Tumor resection",
            &vocab,
        );
        assert_eq!(steps.len(), 3);
        assert!(steps[0].canonical && steps[2].canonical);
        assert!(!steps[1].canonical);
        assert_eq!(steps[1].step_id.as_str(), "custom.sing_to_the_patient");
    }
}
