//! Prompt assembly for one agent turn.
//!
//! The prompt has a fixed part (persona, phase, active subtasks, status,
//! case brief, events, guidance) that is never dropped, a knowledge
//! section with a reserved share of the budget, and the dialogue window,
//! which gets whatever is left. Knowledge keeps its best-ranked prefix and
//! dialogue keeps its newest suffix, so growing either list never evicts
//! an item that a smaller list kept.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::agent::backend::{GenerationParams, GenerationRequest, Message, MessageTag};
use crate::agent::persona::RolePersona;
use crate::domain::{EventFiring, PhaseId, PlanStep, RoleId, RouteLabel, SubtaskId, SurgicalCase, Utterance};
use crate::knowledge::{Embedder, KnowledgeBank};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptConfig {
    /// Dialogue window W: the last W utterances are offered.
    pub window: usize,
    pub top_k: usize,
    pub max_length: usize,
    /// Percentage of `max_length` reserved for retrieved knowledge.
    pub knowledge_share_pct: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            window: 6,
            top_k: 3,
            max_length: 12_000,
            knowledge_share_pct: 25,
        }
    }
}

/// One entry of the current phase's agenda.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgendaItem {
    pub id: SubtaskId,
    pub description: String,
    pub owner: RoleId,
    pub done: bool,
}

/// Read-only view of a running simulation at the start of a turn.
#[derive(Debug, Clone)]
pub struct TurnView<'a> {
    pub case: &'a SurgicalCase,
    pub phase: PhaseId,
    pub tick: u64,
    pub transcript: &'a [Utterance],
    pub agenda: Vec<AgendaItem>,
    pub selected_route: Option<&'a RouteLabel>,
    pub proposed_plan: Option<&'a [PlanStep]>,
    pub roster: Vec<RoleId>,
    pub active_events: &'a [EventFiring],
    pub guidance: Option<&'a str>,
}

impl TurnView<'_> {
    pub fn next_subtask(&self) -> Option<&AgendaItem> {
        self.agenda.iter().find(|a| !a.done)
    }

    /// The next pending subtask, if it belongs to `role`.
    pub fn own_subtask(&self, role: RoleId) -> Option<&AgendaItem> {
        self.next_subtask().filter(|a| a.owner == role)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeRef {
    pub chunk_id: String,
    pub bank_id: String,
    pub text: String,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Truncation {
    pub dialogue_dropped: usize,
    pub knowledge_dropped: usize,
    /// The fixed part alone exceeds the budget.
    pub overflow: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptContext {
    pub role: RoleId,
    pub persona: String,
    pub phase: PhaseId,
    pub tick: u64,
    pub active_subtasks: Vec<(SubtaskId, String)>,
    pub own_subtask: Option<(SubtaskId, String)>,
    pub status: Vec<String>,
    pub case_brief: String,
    pub events: Vec<EventFiring>,
    pub guidance: Option<String>,
    pub knowledge: Vec<KnowledgeRef>,
    pub dialogue: Vec<Utterance>,
    pub max_length: usize,
    pub truncation: Truncation,
    pub vars: BTreeMap<String, String>,
}

pub const SECTION_PERSONA: &str = "## Persona";
pub const SECTION_SUBTASKS: &str = "## Active subtasks";
pub const SECTION_KNOWLEDGE: &str = "## Retrieved knowledge";

impl PromptContext {
    fn fixed_message(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "## Phase\n{} ({}), stage {:?}, tick {}\n",
            self.phase,
            self.phase.display_name(),
            self.phase.stage(),
            self.tick
        ));
        s.push_str(SECTION_SUBTASKS);
        s.push('\n');
        if self.active_subtasks.is_empty() {
            s.push_str("(none)\n");
        }
        for (id, d) in &self.active_subtasks {
            s.push_str(&format!("- {id}: {d}\n"));
        }
        s.push_str("## Your next task\n");
        match &self.own_subtask {
            Some((id, d)) => s.push_str(&format!("{id}: {d}\n")),
            None => s.push_str("(none)\n"),
        }
        s.push_str("## Status\n");
        for line in &self.status {
            s.push_str(line);
            s.push('\n');
        }
        if !self.case_brief.is_empty() {
            s.push_str("## Case\n");
            s.push_str(&self.case_brief);
            if !self.case_brief.ends_with('\n') {
                s.push('\n');
            }
        }
        if !self.events.is_empty() {
            s.push_str("## Active events\n");
            for e in &self.events {
                s.push_str(&format!("- {}: {}\n", e.event_id, e.payload));
            }
        }
        if let Some(g) = &self.guidance {
            s.push_str("## Copilot guidance\n");
            s.push_str(g);
            s.push('\n');
        }
        s
    }

    fn persona_message(&self) -> String {
        format!("{SECTION_PERSONA}\nRole: {}\n{}", self.role, self.persona)
    }

    fn knowledge_message(&self) -> Option<String> {
        if self.knowledge.is_empty() {
            return None;
        }
        let mut s = String::from(SECTION_KNOWLEDGE);
        s.push('\n');
        for k in &self.knowledge {
            s.push_str(&knowledge_line(k));
        }
        Some(s)
    }

    pub fn messages(&self) -> Vec<Message> {
        let mut out = vec![
            Message::new(MessageTag::System, self.persona_message()),
            Message::new(MessageTag::RoleContext, self.fixed_message()),
        ];
        if let Some(k) = self.knowledge_message() {
            out.push(Message::new(MessageTag::RoleContext, k));
        }
        for u in &self.dialogue {
            out.push(Message::new(MessageTag::Dialogue, dialogue_line(u)));
        }
        out
    }

    pub fn rendered(&self) -> String {
        let mut s = String::new();
        for m in self.messages() {
            s.push_str(&m.text);
            s.push('\n');
        }
        s
    }

    pub fn rendered_len(&self) -> usize {
        self.messages().iter().map(|m| m.text.len() + 1).sum()
    }

    pub fn request(&self, seed: u64) -> GenerationRequest {
        GenerationRequest {
            role: self.role,
            phase: self.phase,
            messages: self.messages(),
            params: GenerationParams {
                max_length: self.max_length,
                temperature: 0.0,
                seed,
            },
            vars: self.vars.clone(),
        }
    }

    /// Applies the budget: knowledge keeps its best prefix within its
    /// share, dialogue keeps its newest suffix within the remainder.
    fn fit(&mut self, knowledge_share_pct: usize) {
        let fixed = self.persona_message().len() + 1 + self.fixed_message().len() + 1;
        if fixed > self.max_length {
            self.truncation.overflow = true;
        }
        let share = self.max_length * knowledge_share_pct / 100;
        let header = SECTION_KNOWLEDGE.len() + 2;
        let mut used = header;
        let mut keep = 0;
        for k in &self.knowledge {
            let len = knowledge_line(k).len();
            if used + len > share {
                break;
            }
            used += len;
            keep += 1;
        }
        self.truncation.knowledge_dropped = self.knowledge.len() - keep;
        self.knowledge.truncate(keep);

        let dialogue_budget = self.max_length.saturating_sub(fixed + share);
        let mut used = 0;
        let mut keep = 0;
        for u in self.dialogue.iter().rev() {
            let len = dialogue_line(u).len() + 1;
            if used + len > dialogue_budget {
                break;
            }
            used += len;
            keep += 1;
        }
        let drop = self.dialogue.len() - keep;
        self.truncation.dialogue_dropped = drop;
        self.dialogue.drain(..drop);
    }
}

fn knowledge_line(k: &KnowledgeRef) -> String {
    format!("[{}] {}\n", k.chunk_id, k.text.replace('\n', " "))
}

fn dialogue_line(u: &Utterance) -> String {
    format!("[seq {}] {}: {}", u.seq, u.speaker, u.text)
}

/// Builds the context for `persona` at the current turn. The knowledge
/// bank, when given, must be the one bound to the persona.
pub fn assemble_prompt(
    persona: &RolePersona,
    view: &TurnView<'_>,
    bank: Option<&KnowledgeBank>,
    embedder: &dyn Embedder,
    cfg: &PromptConfig,
) -> PromptContext {
    let role = persona.role;
    let active_subtasks: Vec<(SubtaskId, String)> = view
        .agenda
        .iter()
        .filter(|a| !a.done)
        .map(|a| (a.id.clone(), a.description.clone()))
        .collect();
    let own = view.own_subtask(role).map(|a| (a.id.clone(), a.description.clone()));
    let next = view.next_subtask();

    let last_text = view.transcript.last().map(|u| u.text.as_str()).unwrap_or("");
    let focus = own
        .as_ref()
        .map(|(_, d)| d.as_str())
        .or(next.map(|a| a.description.as_str()))
        .unwrap_or("");
    let query = format!("{focus} {last_text}");

    let bank = bank.filter(|b| persona.knowledge_bank_id.as_deref() == Some(b.bank_id.as_str()));
    let knowledge = match bank {
        Some(b) if cfg.top_k > 0 && b.built && !query.trim().is_empty() => b
            .retrieve_top_k(&query, cfg.top_k, embedder)
            .unwrap_or_default()
            .into_iter()
            .map(|s| KnowledgeRef {
                chunk_id: s.chunk.chunk_id,
                bank_id: b.bank_id.clone(),
                text: s.chunk.text,
                score: s.score,
            })
            .collect(),
        _ => Vec::new(),
    };
    debug_assert!(knowledge
        .iter()
        .all(|k| Some(k.bank_id.as_str()) == persona.knowledge_bank_id.as_deref()));

    let start = view.transcript.len().saturating_sub(cfg.window);
    let dialogue = view.transcript[start..].to_vec();

    let route = view.selected_route.map(|r| r.as_str().to_string());
    let plan = view.proposed_plan.map(|p| {
        p.iter()
            .map(|s| s.step_id.as_str())
            .collect::<Vec<_>>()
            .join(", ")
    });
    let status = vec![
        format!("Selected route: {}", route.as_deref().unwrap_or("none")),
        format!("Proposed plan: {}", plan.as_deref().unwrap_or("none")),
        format!(
            "Team: {}",
            view.roster.iter().map(|r| r.as_str()).collect::<Vec<_>>().join(", ")
        ),
    ];

    let mut vars = BTreeMap::new();
    vars.insert("role".into(), role.as_str().to_string());
    vars.insert("role_name".into(), role.display_name().to_string());
    vars.insert("phase".into(), view.phase.as_str().to_string());
    vars.insert("phase_name".into(), view.phase.display_name().to_string());
    vars.insert("case_id".into(), view.case.case_id.clone());
    vars.insert("tick".into(), view.tick.to_string());
    vars.insert("route".into(), route.clone().unwrap_or_default());
    vars.insert(
        "own_subtask".into(),
        own.as_ref().map(|(id, _)| id.to_string()).unwrap_or_default(),
    );
    vars.insert(
        "own_subtask_desc".into(),
        own.as_ref().map(|(_, d)| d.clone()).unwrap_or_default(),
    );
    vars.insert(
        "next_subtask".into(),
        next.map(|a| a.id.to_string()).unwrap_or_default(),
    );
    vars.insert(
        "next_subtask_desc".into(),
        next.map(|a| a.description.clone()).unwrap_or_default(),
    );

    let mut ctx = PromptContext {
        role,
        persona: persona.persona_text.clone(),
        phase: view.phase,
        tick: view.tick,
        active_subtasks,
        own_subtask: own,
        status,
        case_brief: view.case.summary(),
        events: view.active_events.to_vec(),
        guidance: view.guidance.map(str::to_string),
        knowledge,
        dialogue,
        max_length: cfg.max_length,
        truncation: Truncation::default(),
        vars,
    };
    ctx.fit(cfg.knowledge_share_pct);
    ctx
}

/// Recovers the persona text and active subtask ids from a rendered
/// prompt. Used to check that truncation never removes them.
pub fn reparse_sections(rendered: &str) -> (String, Vec<String>) {
    let mut persona = String::new();
    let mut subtasks = Vec::new();
    let mut section = "";
    for line in rendered.lines() {
        if line.starts_with("## ") {
            section = line;
            continue;
        }
        match section {
            SECTION_PERSONA if !line.starts_with("Role: ") => {
                persona.push_str(line);
            }
            SECTION_SUBTASKS => {
                if let Some(rest) = line.strip_prefix("- ") {
                    if let Some((id, _)) = rest.split_once(':') {
                        subtasks.push(id.to_string());
                    }
                }
            }
            _ => {}
        }
    }
    (persona, subtasks)
}
