//! The episode engine: phases, speaker rotation, event triggers and
//! finalization into a [`SimulatedReport`].

pub mod policy;
pub mod report;

pub use policy::TurnPolicy;
pub use report::{
    derive_report, phase_agenda, verify_transcript, ExecutedSubtask, FiredEvent, PhaseCompletion, SimStatus,
    SimulatedReport, TranscriptHeader,
};

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use regex::{Regex, RegexBuilder};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::backend::{BackendError, GenerationBackend};
use crate::agent::directive::{parse_action, render_directive};
use crate::agent::persona::RolePersona;
use crate::agent::prompt::{assemble_prompt, AgendaItem, PromptConfig, PromptContext, TurnView};
use crate::agent::generate_utterance;
use crate::copilot::{
    extract_lessons, render_plan, CaseRecord, Copilot, CopilotAnswer, CopilotConfig, CopilotError, EntryKind,
    Guidance, LongMemoryStore, MemoryError, MemoryLine, Outcome, RetrievedLesson, ShortMemory,
};
use crate::domain::{
    validate_case, Action, EventFiring, EventTrigger, Origin, PhaseId, PlanStep, RoleId, RouteLabel, Speaker,
    StageId, SubtaskId, SurgicalCase, Utterance, Violation,
};
use crate::eval::{classify_failure, AblationFlags, EvalConfig, RunFingerprint};
use crate::knowledge::{HashEmbedder, KnowledgeBank, KnowledgeLibrary};
use crate::vocab::Vocabulary;

#[derive(Debug, Error)]
pub enum WorkflowError {
    #[error("case failed validation: {0:?}")]
    InvalidCase(Vec<Violation>),
    #[error("roster lacks roles required by the turn policy: {0:?}")]
    IncompleteRoster(Vec<RoleId>),
    #[error("invalid turn policy: {0}")]
    InvalidPolicy(String),
    #[error("trigger `{event_id}` has an invalid pattern: {message}")]
    InvalidTrigger { event_id: String, message: String },
    #[error("simulation is not running")]
    SimulationNotRunning,
    #[error("episode is complete; finalize it")]
    EpisodeComplete,
    #[error("episode is not complete; pass force to abort-finalize")]
    NotReady,
    #[error("simulation already finalized")]
    AlreadyFinalized,
    #[error("event `{0}` already fired")]
    DuplicateEvent(String),
    #[error("it is not {role}'s turn")]
    NotYourTurn { role: RoleId },
    #[error("role {0} cannot be human-controlled")]
    RoleUnavailable(RoleId),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
}

impl WorkflowError {
    pub fn code(&self) -> &'static str {
        match self {
            WorkflowError::InvalidCase(_) => "InvalidCase",
            WorkflowError::IncompleteRoster(_) => "IncompleteRoster",
            WorkflowError::InvalidPolicy(_) => "InvalidConfig",
            WorkflowError::InvalidTrigger { .. } => "InvalidConfig",
            WorkflowError::SimulationNotRunning => "SimulationNotRunning",
            WorkflowError::EpisodeComplete => "EpisodeComplete",
            WorkflowError::NotReady => "NotReady",
            WorkflowError::AlreadyFinalized => "AlreadyFinalized",
            WorkflowError::DuplicateEvent(_) => "DuplicateEvent",
            WorkflowError::NotYourTurn { .. } => "NotYourTurn",
            WorkflowError::RoleUnavailable(_) => "RoleUnavailable",
            WorkflowError::Backend(_) => "BackendFailure",
            WorkflowError::Memory(e) => e.code(),
        }
    }
}

/// Run-level switches and budgets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub flags: AblationFlags,
    pub prompt: PromptConfig,
    pub copilot: CopilotConfig,
    /// Utterances a trigger pattern looks back over.
    pub trigger_window: usize,
    /// Summarize lessons with the backend instead of the template.
    pub backend_lessons: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            flags: AblationFlags::default(),
            prompt: PromptConfig::default(),
            copilot: CopilotConfig::default(),
            trigger_window: 4,
            backend_lessons: false,
        }
    }
}

impl SimConfig {
    pub fn with_flags(flags: AblationFlags) -> Self {
        SimConfig {
            flags,
            copilot: CopilotConfig {
                react: flags.react_on,
                ..CopilotConfig::default()
            },
            ..SimConfig::default()
        }
    }
}

/// Shared, read-mostly resources a simulation draws on.
#[derive(Clone)]
pub struct SimResources {
    pub vocab: Arc<Vocabulary>,
    pub backend: Arc<dyn GenerationBackend>,
    pub library: Option<Arc<KnowledgeLibrary>>,
    pub long_memory: Option<Arc<LongMemoryStore>>,
}

impl std::fmt::Debug for SimResources {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SimResources")
            .field("backend", &self.backend.id())
            .field("library", &self.library)
            .field("long_memory", &self.long_memory.as_ref().map(|m| m.len()))
            .finish()
    }
}

/// Everything besides the case that configures one episode.
#[derive(Debug, Clone)]
pub struct SimSetup {
    pub personas: BTreeMap<RoleId, RolePersona>,
    pub policy: TurnPolicy,
    pub triggers: Vec<EventTrigger>,
    pub seed: u64,
    pub config: SimConfig,
    /// Defaults to an id derived from the case and seed.
    pub sim_id: Option<String>,
}

impl SimSetup {
    pub fn new(seed: u64) -> Self {
        SimSetup {
            personas: crate::agent::default_personas(),
            policy: TurnPolicy::default(),
            triggers: Vec::new(),
            seed,
            config: SimConfig::default(),
            sim_id: None,
        }
    }
}

/// Whose move it is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "role", rename_all = "snake_case")]
pub enum NextTurn {
    /// A queued event is announced next.
    Event,
    Copilot,
    Role(RoleId),
    /// The last phase is done; only finalize remains.
    Complete,
}

/// Side-channel notices for observers (the service streams these).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SimNotice {
    PhaseChanged { from: PhaseId, to: PhaseId, tick: u64 },
    Guidance { guidance: Guidance },
    EpisodeComplete { tick: u64 },
}

/// One running episode. Single-writer: callers serialize mutations.
#[derive(Debug)]
pub struct Simulation {
    sim_id: String,
    case: SurgicalCase,
    personas: BTreeMap<RoleId, RolePersona>,
    roster: Vec<RoleId>,
    policy: TurnPolicy,
    triggers: Vec<(EventTrigger, Regex)>,
    seed: u64,
    config: SimConfig,
    resources: SimResources,

    status: SimStatus,
    complete: bool,
    phase: PhaseId,
    tick: u64,
    transcript: Vec<Utterance>,
    pending: Vec<EventFiring>,
    fired_ids: BTreeSet<String>,
    fired: Vec<FiredEvent>,
    active_events: Vec<EventFiring>,
    extras: BTreeMap<PhaseId, Vec<SubtaskId>>,
    completed: BTreeMap<PhaseId, Vec<SubtaskId>>,
    rotation_idx: usize,
    phase_turns: u32,
    copilot_due: bool,
    route_failed: bool,
    plan_failed: bool,
    selected_route: Option<RouteLabel>,
    proposed_plan: Option<Vec<PlanStep>>,
    guidance: Option<Guidance>,
    short: ShortMemory,
    lessons: Vec<RetrievedLesson>,
    warnings: Vec<String>,
    notices: Vec<SimNotice>,
    report: Option<SimulatedReport>,
    record_id: Option<String>,
}

/// Derives a sub-seed from a seed and a counter.
pub fn mix_seed(seed: u64, tick: u64) -> u64 {
    // splitmix64 finalizer over seed and tick.
    let mut z = seed ^ tick.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Simulation {
    pub fn new(case: SurgicalCase, setup: SimSetup, resources: SimResources) -> Result<Simulation, WorkflowError> {
        let violations = validate_case(&case, &resources.vocab.taxonomy);
        if !violations.is_empty() {
            return Err(WorkflowError::InvalidCase(violations));
        }
        setup.policy.validate().map_err(WorkflowError::InvalidPolicy)?;
        let copilot_on = setup.config.flags.copilot_on;
        let missing: Vec<RoleId> = setup
            .policy
            .required_roles(copilot_on)
            .into_iter()
            .filter(|r| !setup.personas.contains_key(r))
            .collect();
        if !missing.is_empty() {
            return Err(WorkflowError::IncompleteRoster(missing));
        }
        let mut triggers = Vec::with_capacity(setup.triggers.len());
        for t in setup.triggers {
            let re = RegexBuilder::new(&t.pattern)
                .case_insensitive(true)
                .build()
                .map_err(|e| WorkflowError::InvalidTrigger {
                    event_id: t.event_id.clone(),
                    message: e.to_string(),
                })?;
            triggers.push((t, re));
        }
        let roster: Vec<RoleId> = setup
            .personas
            .keys()
            .copied()
            .filter(|r| *r != RoleId::SurgeryCopilot || copilot_on)
            .collect();
        let lessons = match (&resources.long_memory, setup.config.flags.long_memory_on && copilot_on) {
            (Some(store), true) => store.retrieve_experience(&case, setup.config.copilot.top_m),
            _ => Vec::new(),
        };
        let sim_id = setup
            .sim_id
            .unwrap_or_else(|| format!("sim-{}-{:016x}", case.case_id, setup.seed));
        Ok(Simulation {
            sim_id,
            case,
            personas: setup.personas,
            roster,
            policy: setup.policy,
            triggers,
            seed: setup.seed,
            config: setup.config,
            resources,
            status: SimStatus::Running,
            complete: false,
            phase: PhaseId::PatientTransfer,
            tick: 0,
            transcript: Vec::new(),
            pending: Vec::new(),
            fired_ids: BTreeSet::new(),
            fired: Vec::new(),
            active_events: Vec::new(),
            extras: BTreeMap::new(),
            completed: BTreeMap::new(),
            rotation_idx: 0,
            phase_turns: 0,
            copilot_due: false,
            route_failed: false,
            plan_failed: false,
            selected_route: None,
            proposed_plan: None,
            guidance: None,
            short: ShortMemory::new(),
            lessons,
            warnings: Vec::new(),
            notices: Vec::new(),
            report: None,
            record_id: None,
        })
    }

    pub fn sim_id(&self) -> &str {
        &self.sim_id
    }

    pub fn case(&self) -> &SurgicalCase {
        &self.case
    }

    pub fn phase(&self) -> PhaseId {
        self.phase
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn status(&self) -> SimStatus {
        self.status
    }

    pub fn is_complete(&self) -> bool {
        self.complete
    }

    pub fn transcript(&self) -> &[Utterance] {
        &self.transcript
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn policy(&self) -> &TurnPolicy {
        &self.policy
    }

    pub fn roster(&self) -> &[RoleId] {
        &self.roster
    }

    pub fn selected_route(&self) -> Option<&RouteLabel> {
        self.selected_route.as_ref()
    }

    pub fn proposed_plan(&self) -> Option<&[PlanStep]> {
        self.proposed_plan.as_deref()
    }

    pub fn guidance(&self) -> Option<&Guidance> {
        self.guidance.as_ref()
    }

    pub fn short_memory(&self) -> &ShortMemory {
        &self.short
    }

    pub fn lessons(&self) -> &[RetrievedLesson] {
        &self.lessons
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn fired_events(&self) -> &[FiredEvent] {
        &self.fired
    }

    pub fn report(&self) -> Option<&SimulatedReport> {
        self.report.as_ref()
    }

    /// Long-memory record written at finalize, if a store was attached.
    pub fn record_id(&self) -> Option<&str> {
        self.record_id.as_deref()
    }

    pub fn drain_notices(&mut self) -> Vec<SimNotice> {
        std::mem::take(&mut self.notices)
    }

    pub fn fingerprint(&self) -> RunFingerprint {
        RunFingerprint {
            flags: self.config.flags,
            seed: self.seed,
            backend_id: self.resources.backend.id(),
        }
    }

    fn copilot_active(&self) -> bool {
        self.config.flags.copilot_on && self.policy.copilot_interleave
    }

    fn extras_for(&self, phase: PhaseId) -> &[SubtaskId] {
        self.extras.get(&phase).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Agenda ids of `phase` under the current route and plan.
    pub fn agenda_ids(&self, phase: PhaseId) -> Vec<SubtaskId> {
        phase_agenda(
            &self.resources.vocab,
            phase,
            self.selected_route.as_ref(),
            self.proposed_plan.as_deref(),
            self.extras_for(phase),
        )
    }

    pub fn agenda(&self) -> Vec<AgendaItem> {
        let done: BTreeSet<&SubtaskId> = self.completed.get(&self.phase).into_iter().flatten().collect();
        self.agenda_ids(self.phase)
            .into_iter()
            .filter_map(|id| {
                let (_, t) = self.resources.vocab.taxonomy.get(&id)?;
                Some(AgendaItem {
                    done: done.contains(&id),
                    description: t.description.clone(),
                    owner: t.owner,
                    id,
                })
            })
            .collect()
    }

    pub fn completed(&self) -> &BTreeMap<PhaseId, Vec<SubtaskId>> {
        &self.completed
    }

    pub fn view(&self) -> TurnView<'_> {
        TurnView {
            case: &self.case,
            phase: self.phase,
            tick: self.tick,
            transcript: &self.transcript,
            agenda: self.agenda(),
            selected_route: self.selected_route.as_ref(),
            proposed_plan: self.proposed_plan.as_deref(),
            roster: self.roster.clone(),
            active_events: &self.active_events,
            guidance: None,
        }
    }

    pub fn next_turn(&self) -> NextTurn {
        if self.complete {
            NextTurn::Complete
        } else if !self.pending.is_empty() {
            NextTurn::Event
        } else if self.copilot_due {
            NextTurn::Copilot
        } else {
            NextTurn::Role(self.policy.rotation(self.phase)[self.rotation_idx])
        }
    }

    fn ensure_running(&self) -> Result<(), WorkflowError> {
        if self.status != SimStatus::Running {
            return Err(WorkflowError::SimulationNotRunning);
        }
        Ok(())
    }

    fn bank_for(&self, persona: &RolePersona) -> Option<&KnowledgeBank> {
        if !self.config.flags.rag_on {
            return None;
        }
        let id = persona.knowledge_bank_id.as_deref()?;
        self.resources.library.as_ref()?.get(id).map(|b| b.as_ref())
    }

    fn embedder(&self) -> &dyn crate::knowledge::Embedder {
        static FALLBACK: HashEmbedder = HashEmbedder::DEFAULT;
        match &self.resources.library {
            Some(lib) => lib.embedder(),
            None => &FALLBACK,
        }
    }

    /// Prompt the given role would receive right now.
    pub fn prompt_for(&self, role: RoleId) -> Option<PromptContext> {
        let persona = self.personas.get(&role)?;
        let guidance = self.guidance.as_ref().map(Guidance::render);
        let mut view = self.view();
        view.guidance = guidance.as_deref();
        Some(assemble_prompt(persona, &view, self.bank_for(persona), self.embedder(), &self.config.prompt))
    }

    /// Produces the next utterance.
    pub fn advance_turn(&mut self) -> Result<Utterance, WorkflowError> {
        self.ensure_running()?;
        match self.next_turn() {
            NextTurn::Complete => Err(WorkflowError::EpisodeComplete),
            NextTurn::Event => Ok(self.surface_event()),
            NextTurn::Copilot => self.copilot_turn(),
            NextTurn::Role(role) => {
                let persona = self.personas.get(&role).expect("roster checked at creation");
                let guidance = self.guidance.as_ref().map(Guidance::render);
                let mut view = self.view();
                view.guidance = guidance.as_deref();
                let ctx = assemble_prompt(persona, &view, self.bank_for(persona), self.embedder(), &self.config.prompt);
                let turn = generate_utterance(
                    persona,
                    &ctx,
                    self.resources.backend.as_ref(),
                    &self.resources.vocab,
                    self.transcript.len() as u64,
                    mix_seed(self.seed, self.tick),
                )?;
                self.warnings.extend(turn.warnings);
                let u = turn.utterance;
                Ok(self.commit_rotation(role, u.text, u.action, Origin::Agent))
            }
        }
    }

    /// Applies a human-written utterance for `role`, which must hold the
    /// current turn.
    pub fn submit_human(&mut self, role: RoleId, text: &str) -> Result<Utterance, WorkflowError> {
        self.ensure_running()?;
        if role == RoleId::SurgeryCopilot {
            return Err(WorkflowError::RoleUnavailable(role));
        }
        if self.next_turn() != NextTurn::Role(role) {
            return Err(WorkflowError::NotYourTurn { role });
        }
        let persona = self.personas.get(&role).ok_or(WorkflowError::RoleUnavailable(role))?;
        let parsed = parse_action(role, text, &persona.action_grammar, &self.resources.vocab);
        self.warnings.extend(parsed.warnings);
        Ok(self.commit_rotation(role, text.to_string(), parsed.action, Origin::Human))
    }

    /// Appends an informational system line. It does not take a turn.
    pub fn system_note(&mut self, text: &str) -> Result<Utterance, WorkflowError> {
        self.ensure_running()?;
        let u = self.push_utterance(Speaker::System, text.to_string(), None, Origin::System);
        Ok(u)
    }

    /// Queues an event for announcement before the next turn.
    pub fn inject_event(&mut self, firing: EventFiring) -> Result<(), WorkflowError> {
        self.ensure_running()?;
        if self.complete {
            return Err(WorkflowError::EpisodeComplete);
        }
        if !self.fired_ids.insert(firing.event_id.clone()) {
            return Err(WorkflowError::DuplicateEvent(firing.event_id));
        }
        self.pending.push(firing);
        Ok(())
    }

    /// Question to the copilot. Reads state only.
    pub fn copilot_query(&self, question: &str) -> CopilotAnswer {
        let persona = self
            .personas
            .get(&RoleId::SurgeryCopilot)
            .cloned()
            .unwrap_or_else(|| RolePersona::default_for(RoleId::SurgeryCopilot));
        let post_op = self.status != SimStatus::Running;
        let memory: Vec<MemoryLine> = if post_op || self.short.is_empty() {
            self.transcript
                .iter()
                .map(|u| MemoryLine {
                    id: format!("seq-{}", u.seq),
                    text: format!("{}: {}", u.speaker, u.text),
                })
                .collect()
        } else {
            self.short
                .entries()
                .iter()
                .map(|e| MemoryLine {
                    id: e.entry_id.clone(),
                    text: e.text.clone(),
                })
                .collect()
        };
        let copilot = Copilot {
            persona: &persona,
            bank: self.bank_for(&persona),
            embedder: self.embedder(),
            backend: self.resources.backend.as_ref(),
            vocab: &self.resources.vocab,
            cfg: self.config.copilot,
        };
        copilot.answer(question, &self.case, self.phase, &memory, post_op, mix_seed(self.seed, self.tick ^ 0xA5A5))
    }

    fn push_utterance(&mut self, speaker: Speaker, text: String, action: Option<Action>, origin: Origin) -> Utterance {
        let u = Utterance {
            seq: self.transcript.len() as u64,
            tick: self.tick,
            phase: self.phase,
            speaker,
            text,
            action,
            origin,
        };
        self.tick += 1;
        let kind = if speaker == Speaker::System { EntryKind::Event } else { EntryKind::Utterance };
        if kind == EntryKind::Utterance || !u.text.starts_with("EVENT ") {
            let _ = self.short.append(u.tick, u.phase, kind, format!("{}: {}", u.speaker, u.text));
        }
        self.transcript.push(u.clone());
        u
    }

    /// Checks an action against the engine state; invalid ones become
    /// no-ops with a warning.
    fn validate_action(&mut self, role: RoleId, action: Option<Action>) -> Option<Action> {
        let action = action?;
        let preop = self.phase.stage() == StageId::Preoperative;
        let problem = match &action {
            Action::CompleteSubtask(id) => match self.resources.vocab.taxonomy.phase_of(id) {
                None => Some(format!("unknown subtask `{id}`")),
                Some(p) if p != self.phase => Some(format!("subtask `{id}` belongs to {p}, not {}", self.phase)),
                Some(_) if self.completed.get(&self.phase).is_some_and(|c| c.contains(id)) => {
                    Some(format!("subtask `{id}` already complete"))
                }
                Some(_) => None,
            },
            Action::SelectRoute(_) | Action::ProposePlan(_) if !preop => {
                Some(format!("{} is only allowed before the operation", action.kind().directive_key()))
            }
            Action::ProposePlan(steps) if steps.is_empty() => Some("empty plan".to_string()),
            _ => None,
        };
        match problem {
            Some(p) => {
                self.warnings.push(format!("tick {} {role}: {p}; treated as noop", self.tick));
                Some(Action::NoOp)
            }
            None => Some(action),
        }
    }

    fn apply_action(&mut self, role: RoleId, u: &Utterance) {
        let Some(action) = &u.action else {
            return;
        };
        let text = render_directive(action);
        match action {
            Action::CompleteSubtask(id) => {
                self.completed.entry(self.phase).or_default().push(id.clone());
            }
            Action::SelectRoute(r) => self.selected_route = Some(r.clone()),
            Action::ProposePlan(steps) => self.proposed_plan = Some(steps.clone()),
            Action::Monitor(_) if role == RoleId::Anesthetist => {
                let _ = self.short.append(u.tick, u.phase, EntryKind::Vitals, text);
                return;
            }
            Action::NoOp => return,
            _ => {}
        }
        let _ = self.short.append(u.tick, u.phase, EntryKind::Action, format!("{role}: {text}"));
    }

    fn commit_rotation(&mut self, role: RoleId, text: String, action: Option<Action>, origin: Origin) -> Utterance {
        let action = self.validate_action(role, action);
        let u = self.push_utterance(Speaker::Role(role), text, action, origin);
        self.apply_action(role, &u);
        self.phase_turns += 1;
        self.rotation_idx += 1;
        if self.rotation_idx >= self.policy.rotation(self.phase).len() {
            self.rotation_idx = 0;
            self.copilot_due = self.copilot_active();
        }
        self.after_utterance();
        u
    }

    fn surface_event(&mut self) -> Utterance {
        let idx = self
            .pending
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| b.priority.cmp(&a.priority).then(a.event_id.cmp(&b.event_id)))
            .map(|(i, _)| i)
            .expect("pending checked by caller");
        let ev = self.pending.remove(idx);
        let text = format!("{} {}", report::event_text_prefix(&ev.event_id), ev.payload);
        let u = self.push_utterance(Speaker::System, text, None, Origin::System);
        let _ = self.short.append(u.tick, u.phase, EntryKind::Event, format!("{}: {}", ev.event_id, ev.payload));
        let extras = self.extras.entry(self.phase).or_default();
        for id in &ev.adds_subtasks {
            if !extras.contains(id) {
                extras.push(id.clone());
            }
        }
        self.fired.push(FiredEvent {
            event_id: ev.event_id.clone(),
            phase: u.phase,
            tick: u.tick,
            seq: u.seq,
            priority: ev.priority,
            payload: ev.payload.clone(),
            adds_subtasks: ev.adds_subtasks.clone(),
        });
        self.active_events.push(ev);
        if self.pending.is_empty() {
            self.maybe_advance_phase();
        }
        u
    }

    fn copilot_turn(&mut self) -> Result<Utterance, WorkflowError> {
        let persona = self
            .personas
            .get(&RoleId::SurgeryCopilot)
            .cloned()
            .expect("roster checked at creation");
        let seed = mix_seed(self.seed, self.tick);
        let preop = self.phase.stage() == StageId::Preoperative;
        let (text, action, guidance) = {
            let copilot = Copilot {
                persona: &persona,
                bank: self.bank_for(&persona),
                embedder: self.embedder(),
                backend: self.resources.backend.as_ref(),
                vocab: &self.resources.vocab,
                cfg: self.config.copilot,
            };
            if preop && self.selected_route.is_none() && !self.route_failed {
                match copilot.select_route(&self.case, &self.lessons, self.phase, seed) {
                    Ok(d) => (d.reply, Some(Action::SelectRoute(d.route)), None),
                    Err(CopilotError::Backend(e)) => return Err(e.into()),
                    Err(e) => {
                        self.route_failed = true;
                        self.warnings.push(format!("tick {} copilot: {e}", self.tick));
                        ("I could not settle on a surgical route.".to_string(), Some(Action::NoOp), None)
                    }
                }
            } else if preop && self.proposed_plan.is_none() && !self.plan_failed && self.selected_route.is_some() {
                let route = self.selected_route.clone().expect("checked");
                match copilot.generate_plan(&self.case, &route, &self.lessons, self.phase, seed) {
                    Ok(steps) => {
                        let action = Action::ProposePlan(steps.clone());
                        let text = format!(
                            "Proposed plan for {}:\n{}{}",
                            route.as_str(),
                            render_plan(&steps),
                            render_directive(&action)
                        );
                        (text, Some(action), None)
                    }
                    Err(CopilotError::Backend(e)) => return Err(e.into()),
                    Err(e) => {
                        self.plan_failed = true;
                        self.warnings.push(format!("tick {} copilot: {e}", self.tick));
                        ("I could not draft a surgical plan.".to_string(), Some(Action::NoOp), None)
                    }
                }
            } else {
                let view = self.view();
                let g = copilot.guide_stage(&view, &self.short, &self.lessons, seed);
                let action = g.top_alert().map(|a| Action::RaiseAlert(a.text.clone()));
                (g.render(), action, Some(g))
            }
        };
        let action = self.validate_action(RoleId::SurgeryCopilot, action);
        let u = self.push_utterance(Speaker::Role(RoleId::SurgeryCopilot), text, action, Origin::Agent);
        self.apply_action(RoleId::SurgeryCopilot, &u);
        if let Some(g) = guidance {
            self.notices.push(SimNotice::Guidance { guidance: g.clone() });
            self.guidance = Some(g);
        }
        self.copilot_due = false;
        self.after_utterance();
        Ok(u)
    }

    fn after_utterance(&mut self) {
        self.check_triggers();
        if self.pending.is_empty() {
            self.maybe_advance_phase();
        }
    }

    fn check_triggers(&mut self) {
        let window: Vec<&str> = self
            .transcript
            .iter()
            .rev()
            .take(self.config.trigger_window)
            .filter(|u| u.speaker != Speaker::System)
            .map(|u| u.text.as_str())
            .collect();
        let mut newly = Vec::new();
        for (t, re) in &self.triggers {
            if self.fired_ids.contains(&t.event_id) || t.phase.is_some_and(|p| p != self.phase) {
                continue;
            }
            if window.iter().any(|text| re.is_match(text)) {
                newly.push(t.firing());
            }
        }
        for f in newly {
            self.fired_ids.insert(f.event_id.clone());
            self.pending.push(f);
        }
    }

    fn phase_done(&self) -> bool {
        let done: BTreeSet<&SubtaskId> = self.completed.get(&self.phase).into_iter().flatten().collect();
        self.agenda_ids(self.phase).iter().all(|id| done.contains(id))
    }

    fn maybe_advance_phase(&mut self) {
        if self.complete {
            return;
        }
        if !(self.phase_done() || self.phase_turns >= self.policy.phase_budget) {
            return;
        }
        match self.phase.next() {
            Some(next) => {
                self.notices.push(SimNotice::PhaseChanged {
                    from: self.phase,
                    to: next,
                    tick: self.tick,
                });
                self.phase = next;
                self.rotation_idx = 0;
                self.phase_turns = 0;
                self.copilot_due = false;
                self.active_events.clear();
            }
            None => {
                self.complete = true;
                self.pending.clear();
                self.notices.push(SimNotice::EpisodeComplete { tick: self.tick });
            }
        }
    }

    /// Runs turns until the episode is complete or `max_turns` is hit.
    pub fn run_to_completion(&mut self, max_turns: usize) -> Result<(), WorkflowError> {
        for _ in 0..max_turns {
            if self.complete {
                return Ok(());
            }
            self.advance_turn()?;
        }
        Ok(())
    }

    fn header(&self, aborted: bool) -> TranscriptHeader {
        TranscriptHeader {
            format: report::TRANSCRIPT_FORMAT.to_string(),
            format_version: report::TRANSCRIPT_FORMAT_VERSION.to_string(),
            sim_id: self.sim_id.clone(),
            case_id: self.case.case_id.clone(),
            disease: self.case.disease_label.clone(),
            fingerprint: self.fingerprint(),
            phase_budget: self.policy.phase_budget,
            aborted,
            events: self.fired.clone(),
            warnings: self.warnings.clone(),
        }
    }

    /// Closes the episode. Without `force` the episode must be complete;
    /// with it an incomplete episode is finalized as aborted. Short memory
    /// is sealed and, when a long-memory store is attached, one record is
    /// appended.
    pub fn finalize(&mut self, force: bool) -> Result<SimulatedReport, WorkflowError> {
        if self.status != SimStatus::Running {
            return Err(WorkflowError::AlreadyFinalized);
        }
        if !self.complete && !force {
            return Err(WorkflowError::NotReady);
        }
        let aborted = !self.complete;
        let report = derive_report(&self.header(aborted), &self.transcript, &self.resources.vocab);
        if let Some(store) = &self.resources.long_memory {
            let failure = classify_failure(&report, &self.case, &EvalConfig::default());
            let draft = CaseRecord::draft(&report, &self.case, Outcome::from_failure(failure));
            let backend = self.config.backend_lessons.then_some(self.resources.backend.as_ref());
            let lessons = extract_lessons(&draft, backend);
            self.record_id = Some(store.record_case(draft, lessons)?);
        }
        self.short.seal();
        self.status = report.status;
        self.report = Some(report.clone());
        Ok(report)
    }
}
