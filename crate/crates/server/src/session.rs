//! Session actors and their ordered event logs.
//!
//! Each session owns its [`Simulation`] on a dedicated thread. Handlers
//! send commands over a channel, so engine mutations are serialized and a
//! slow backend call blocks only its own session. Every state change is
//! appended to an [`EventLog`] that streams fan out from.

use std::collections::BTreeSet;
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use orsim_core::copilot::{Alert, CopilotAnswer, Guidance};
use orsim_core::domain::{PhaseId, RoleId, Utterance};
use orsim_core::eval::{evaluate_case, CaseResult, EvalConfig};
use orsim_core::workflow::{NextTurn, SimNotice, SimStatus, SimulatedReport, Simulation};
use serde::{Deserialize, Serialize};
use tokio::sync::{oneshot, watch};

use crate::error::{ApiError, ErrorDetail};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Autonomous,
    Training,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SessionSettings {
    pub mode: Mode,
    /// Delay between autonomous turns.
    pub pace: Duration,
    /// How long a human-held turn waits before the agent takes it.
    pub human_timeout: Duration,
}

/// One entry of a session's stream. `seq` numbers the stream, not the
/// transcript.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamEvent {
    pub seq: u64,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EventKind {
    Utterance { utterance: Utterance },
    PhaseChanged { from: PhaseId, to: PhaseId, tick: u64 },
    Guidance { guidance: Guidance },
    Alert { phase: PhaseId, alert: Alert },
    RoleTakenOver { role: RoleId },
    HumanTurn { role: RoleId, timeout_ms: u64 },
    Delegated { role: RoleId },
    EpisodeComplete { tick: u64 },
    Error { code: String, message: String },
    Finalized { status: SimStatus, aborted: bool },
}

impl EventKind {
    pub fn name(&self) -> &'static str {
        match self {
            EventKind::Utterance { .. } => "utterance",
            EventKind::PhaseChanged { .. } => "phase_changed",
            EventKind::Guidance { .. } => "guidance",
            EventKind::Alert { .. } => "alert",
            EventKind::RoleTakenOver { .. } => "role_taken_over",
            EventKind::HumanTurn { .. } => "human_turn",
            EventKind::Delegated { .. } => "delegated",
            EventKind::EpisodeComplete { .. } => "episode_complete",
            EventKind::Error { .. } => "error",
            EventKind::Finalized { .. } => "finalized",
        }
    }
}

/// Append-only event list plus a watch channel carrying `(len, closed)`.
#[derive(Debug)]
pub struct EventLog {
    events: Mutex<Vec<StreamEvent>>,
    state: watch::Sender<(usize, bool)>,
}

impl Default for EventLog {
    fn default() -> Self {
        EventLog {
            events: Mutex::default(),
            state: watch::Sender::new((0, false)),
        }
    }
}

impl EventLog {
    pub fn push(&self, kind: EventKind) {
        let mut events = self.events.lock().expect("event log lock");
        let seq = events.len() as u64;
        events.push(StreamEvent { seq, kind });
        let len = events.len();
        self.state.send_modify(|s| s.0 = len);
    }

    /// Marks the stream finished; subscribers end after draining.
    pub fn close(&self) {
        self.state.send_modify(|s| s.1 = true);
    }

    pub fn len(&self) -> usize {
        self.events.lock().expect("event log lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_closed(&self) -> bool {
        self.state.borrow().1
    }

    /// Events with `seq >= from` and whether the log is closed.
    pub fn since(&self, from: u64) -> (Vec<StreamEvent>, bool) {
        let events = self.events.lock().expect("event log lock");
        let closed = self.state.borrow().1;
        let start = (from as usize).min(events.len());
        (events[start..].to_vec(), closed)
    }

    pub fn subscribe(&self) -> watch::Receiver<(usize, bool)> {
        self.state.subscribe()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AwaitingHuman {
    pub role: RoleId,
    pub timeout_ms: u64,
}

/// Session descriptor served by `GET /sessions/{id}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub sim_id: String,
    pub case_id: String,
    pub mode: Mode,
    pub status: SimStatus,
    pub phase: PhaseId,
    pub tick: u64,
    pub transcript_len: usize,
    pub event_count: usize,
    pub roster: Vec<RoleId>,
    pub human_roles: Vec<RoleId>,
    pub next_turn: NextTurn,
    pub awaiting_human: Option<AwaitingHuman>,
    pub fingerprint_digest: String,
    /// Scores of the finished episode against the case's gold annotations.
    pub debrief: Option<CaseResult>,
    pub report: Option<SimulatedReport>,
    pub last_error: Option<ErrorDetail>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickOutcome {
    pub advanced: usize,
    pub utterances: Vec<Utterance>,
    pub next_turn: NextTurn,
    pub awaiting_human: Option<RoleId>,
    pub status: SimStatus,
}

type Reply<T> = oneshot::Sender<Result<T, ApiError>>;

enum Command {
    Tick { turns: usize, reply: Reply<TickOutcome> },
    TakeOver { role: RoleId, reply: Reply<SessionView> },
    Input { role: RoleId, text: String, reply: Reply<Utterance> },
    Query { question: String, reply: Reply<CopilotAnswer> },
    Finalize { force: bool, reply: Reply<SimulatedReport> },
}

/// Cheap, cloneable reference to a running session.
#[derive(Debug, Clone)]
pub struct SessionHandle {
    pub id: String,
    tx: mpsc::Sender<Command>,
    pub log: Arc<EventLog>,
    view: Arc<Mutex<Option<SessionView>>>,
}

impl SessionHandle {
    /// Starts the actor thread for `sim`.
    pub fn spawn(id: String, sim: Simulation, settings: SessionSettings) -> SessionHandle {
        let log = Arc::new(EventLog::default());
        let (tx, rx) = mpsc::channel();
        let mut actor = Actor {
            id: id.clone(),
            sim,
            settings,
            log: log.clone(),
            shared: Arc::new(Mutex::new(None)),
            humans: BTreeSet::new(),
            pending: None,
            next_pace: Instant::now() + settings.pace,
            debrief: None,
            last_error: None,
        };
        actor.refresh_pending();
        actor.publish();
        let view = actor.shared.clone();
        std::thread::Builder::new()
            .name(format!("session-{}", &id[..8.min(id.len())]))
            .spawn(move || actor.run(rx))
            .expect("spawn session thread");
        SessionHandle { id, tx, log, view }
    }

    pub fn view(&self) -> SessionView {
        self.view.lock().expect("view lock").clone().expect("published at spawn")
    }

    async fn call<T>(&self, make: impl FnOnce(Reply<T>) -> Command) -> Result<T, ApiError> {
        let (reply, rx) = oneshot::channel();
        self.tx
            .send(make(reply))
            .map_err(|_| ApiError::new("Internal", "session actor stopped"))?;
        rx.await.map_err(|_| ApiError::new("Internal", "session actor dropped the reply"))?
    }

    pub async fn tick(&self, turns: usize) -> Result<TickOutcome, ApiError> {
        self.call(|reply| Command::Tick { turns, reply }).await
    }

    pub async fn take_over(&self, role: RoleId) -> Result<SessionView, ApiError> {
        self.call(|reply| Command::TakeOver { role, reply }).await
    }

    pub async fn input(&self, role: RoleId, text: String) -> Result<Utterance, ApiError> {
        self.call(|reply| Command::Input { role, text, reply }).await
    }

    pub async fn query(&self, question: String) -> Result<CopilotAnswer, ApiError> {
        self.call(|reply| Command::Query { question, reply }).await
    }

    pub async fn finalize(&self, force: bool) -> Result<SimulatedReport, ApiError> {
        self.call(|reply| Command::Finalize { force, reply }).await
    }
}

struct Pending {
    role: RoleId,
    deadline: Instant,
}

struct Actor {
    id: String,
    sim: Simulation,
    settings: SessionSettings,
    log: Arc<EventLog>,
    /// Descriptor read by handlers; refreshed before every reply.
    shared: Arc<Mutex<Option<SessionView>>>,
    humans: BTreeSet<RoleId>,
    pending: Option<Pending>,
    next_pace: Instant,
    debrief: Option<CaseResult>,
    last_error: Option<ErrorDetail>,
}

impl Actor {
    fn running(&self) -> bool {
        self.sim.status() == SimStatus::Running
    }

    fn run(mut self, rx: mpsc::Receiver<Command>) {
        loop {
            let msg = match self.next_wake() {
                Some(at) => rx.recv_timeout(at.saturating_duration_since(Instant::now())),
                None => rx.recv().map_err(|_| RecvTimeoutError::Disconnected),
            };
            match msg {
                Ok(cmd) => self.handle(cmd),
                Err(RecvTimeoutError::Timeout) => {
                    self.on_timer();
                    self.publish();
                }
                Err(RecvTimeoutError::Disconnected) => break,
            }
        }
        tracing::debug!(session = %self.id, "session actor stopped");
    }

    fn next_wake(&self) -> Option<Instant> {
        if !self.running() {
            return None;
        }
        match self.settings.mode {
            Mode::Autonomous => Some(self.next_pace),
            Mode::Training => self.pending.as_ref().map(|p| p.deadline),
        }
    }

    fn on_timer(&mut self) {
        let now = Instant::now();
        match self.settings.mode {
            Mode::Autonomous => {
                if now >= self.next_pace {
                    self.step();
                    self.next_pace = Instant::now() + self.settings.pace;
                }
            }
            Mode::Training => {
                if let Some(p) = self.pending.take_if(|p| now >= p.deadline) {
                    self.delegate(p.role);
                }
            }
        }
    }

    /// The absent human loses the role; its agent takes the turn.
    fn delegate(&mut self, role: RoleId) {
        let secs = self.settings.human_timeout.as_secs_f64();
        let note = format!(
            "{} did not respond within {secs:.0} s; the {} agent takes over.",
            role.display_name(),
            role.display_name()
        );
        self.humans.remove(&role);
        if let Ok(u) = self.sim.system_note(&note) {
            self.log.push(EventKind::Utterance { utterance: u });
        }
        self.log.push(EventKind::Delegated { role });
        self.step();
    }

    fn publish(&self) {
        *self.shared.lock().expect("view lock") = Some(self.view());
    }

    /// Publishes the new descriptor, then replies, so a client never reads
    /// a view older than its own command.
    fn respond<T>(&self, reply: Reply<T>, result: Result<T, ApiError>) {
        self.publish();
        let _ = reply.send(result);
    }

    fn handle(&mut self, cmd: Command) {
        match cmd {
            Command::Tick { turns, reply } => {
                let r = self.tick(turns);
                self.respond(reply, r);
            }
            Command::TakeOver { role, reply } => {
                let r = self.take_over(role).map(|_| self.view());
                self.respond(reply, r);
            }
            Command::Input { role, text, reply } => {
                let r = self.input(role, &text);
                self.respond(reply, r);
            }
            Command::Query { question, reply } => {
                let r = Ok(self.sim.copilot_query(&question));
                self.respond(reply, r);
            }
            Command::Finalize { force, reply } => {
                let r = self.finalize(force);
                self.respond(reply, r);
            }
        }
    }

    fn require_training(&self) -> Result<(), ApiError> {
        if self.settings.mode != Mode::Training {
            return Err(ApiError::new("NotTrainingMode", "session is autonomous"));
        }
        Ok(())
    }

    fn human_holds_turn(&self) -> Option<RoleId> {
        match self.sim.next_turn() {
            NextTurn::Role(r) if self.humans.contains(&r) => Some(r),
            _ => None,
        }
    }

    fn tick(&mut self, turns: usize) -> Result<TickOutcome, ApiError> {
        self.require_training()?;
        if !self.running() {
            return Err(ApiError::new("SimulationNotRunning", "session is finalized"));
        }
        let start = self.sim.transcript().len();
        let mut advanced = 0;
        while advanced < turns && self.running() && self.human_holds_turn().is_none() {
            if !self.step() {
                break;
            }
            advanced += 1;
        }
        Ok(TickOutcome {
            advanced,
            utterances: self.sim.transcript()[start..].to_vec(),
            next_turn: self.sim.next_turn(),
            awaiting_human: self.pending.as_ref().map(|p| p.role),
            status: self.sim.status(),
        })
    }

    fn take_over(&mut self, role: RoleId) -> Result<(), ApiError> {
        self.require_training()?;
        if role == RoleId::SurgeryCopilot || !self.sim.roster().contains(&role) {
            return Err(ApiError::new("RoleUnavailable", format!("{role} cannot be taken over")));
        }
        if !self.running() {
            return Err(ApiError::new("SimulationNotRunning", "session is finalized"));
        }
        if self.humans.insert(role) {
            self.log.push(EventKind::RoleTakenOver { role });
        }
        self.refresh_pending();
        Ok(())
    }

    fn input(&mut self, role: RoleId, text: &str) -> Result<Utterance, ApiError> {
        self.require_training()?;
        if role == RoleId::SurgeryCopilot {
            return Err(ApiError::new("RoleUnavailable", "the copilot is never human-controlled"));
        }
        if !self.humans.contains(&role) {
            return Err(ApiError::new("RoleUnavailable", format!("{role} is not taken over in this session")));
        }
        let u = self.sim.submit_human(role, text)?;
        self.pending = None;
        self.log.push(EventKind::Utterance { utterance: u.clone() });
        self.after_change();
        Ok(u)
    }

    fn finalize(&mut self, force: bool) -> Result<SimulatedReport, ApiError> {
        let report = self.sim.finalize(force)?;
        self.on_finalized(&report);
        Ok(report)
    }

    /// Advances one agent turn. Returns false when nothing happened.
    fn step(&mut self) -> bool {
        if !self.running() || self.sim.is_complete() {
            return false;
        }
        match self.sim.advance_turn() {
            Ok(u) => {
                self.log.push(EventKind::Utterance { utterance: u });
                self.after_change();
                true
            }
            Err(e) => {
                let err = ApiError::from(e);
                tracing::warn!(session = %self.id, error = %err, "turn failed; aborting session");
                self.log.push(EventKind::Error {
                    code: err.code.to_string(),
                    message: err.message.clone(),
                });
                self.last_error = Some(err.body().error);
                if let Ok(report) = self.sim.finalize(true) {
                    self.on_finalized(&report);
                }
                false
            }
        }
    }

    fn after_change(&mut self) {
        for n in self.sim.drain_notices() {
            match n {
                SimNotice::PhaseChanged { from, to, tick } => self.log.push(EventKind::PhaseChanged { from, to, tick }),
                SimNotice::Guidance { guidance } => {
                    for alert in &guidance.alerts {
                        self.log.push(EventKind::Alert {
                            phase: guidance.phase,
                            alert: alert.clone(),
                        });
                    }
                    self.log.push(EventKind::Guidance { guidance });
                }
                SimNotice::EpisodeComplete { tick } => self.log.push(EventKind::EpisodeComplete { tick }),
            }
        }
        if self.running() && self.sim.is_complete() {
            match self.sim.finalize(false) {
                Ok(report) => self.on_finalized(&report),
                Err(e) => self.last_error = Some(ApiError::from(e).body().error),
            }
        }
        self.refresh_pending();
    }

    fn refresh_pending(&mut self) {
        let holder = if self.running() { self.human_holds_turn() } else { None };
        match holder {
            Some(role) if self.pending.as_ref().map(|p| p.role) != Some(role) => {
                self.pending = Some(Pending {
                    role,
                    deadline: Instant::now() + self.settings.human_timeout,
                });
                self.log.push(EventKind::HumanTurn {
                    role,
                    timeout_ms: self.settings.human_timeout.as_millis() as u64,
                });
            }
            Some(_) => {}
            None => self.pending = None,
        }
    }

    fn on_finalized(&mut self, report: &SimulatedReport) {
        self.pending = None;
        self.debrief = evaluate_case(report, self.sim.case(), &EvalConfig::default()).ok();
        for n in self.sim.drain_notices() {
            if let SimNotice::EpisodeComplete { tick } = n {
                self.log.push(EventKind::EpisodeComplete { tick });
            }
        }
        self.log.push(EventKind::Finalized {
            status: report.status,
            aborted: report.aborted,
        });
        self.log.close();
    }

    fn view(&self) -> SessionView {
        SessionView {
            session_id: self.id.clone(),
            sim_id: self.sim.sim_id().to_string(),
            case_id: self.sim.case().case_id.clone(),
            mode: self.settings.mode,
            status: self.sim.status(),
            phase: self.sim.phase(),
            tick: self.sim.tick(),
            transcript_len: self.sim.transcript().len(),
            event_count: self.log.len(),
            roster: self.sim.roster().to_vec(),
            human_roles: self.humans.iter().copied().collect(),
            next_turn: self.sim.next_turn(),
            awaiting_human: self.pending.as_ref().map(|p| AwaitingHuman {
                role: p.role,
                timeout_ms: self.settings.human_timeout.as_millis() as u64,
            }),
            fingerprint_digest: self.sim.fingerprint().digest(),
            debrief: self.debrief.clone(),
            report: self.sim.report().cloned(),
            last_error: self.last_error.clone(),
        }
    }
}
