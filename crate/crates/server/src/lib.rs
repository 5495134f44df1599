//! HTTP service for simulation sessions.
//!
//! Sessions run autonomously on a paced loop or in training mode, where a
//! client ticks the episode forward and may take over roles. Every session
//! streams an ordered event log over server-sent events. Evaluation runs
//! execute in the background and are polled by id. Bodies are JSON and
//! errors carry a machine-readable code.

pub mod api;
pub mod error;
pub mod session;

use std::collections::HashMap;
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use orsim_core::copilot::LongMemoryStore;
use orsim_core::domain::SurgicalCase;
use orsim_core::runner::RunSpec;

pub use api::router;
pub use error::{ApiError, ErrorBody};
pub use session::{EventKind, Mode, SessionHandle, SessionView, StreamEvent, TickOutcome};

pub const DEFAULT_PACE: Duration = Duration::from_secs(1);
pub const DEFAULT_HUMAN_TIMEOUT: Duration = Duration::from_secs(120);
/// Largest number of turns one training tick may request.
pub const MAX_TICK_TURNS: usize = 1_000;

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub spec: RunSpec,
    /// Cases addressable by id; sorted by id when the state is built.
    pub cases: Vec<SurgicalCase>,
    /// Shared bearer token. `None` disables the check.
    pub token: Option<String>,
    pub pace: Duration,
    pub human_timeout: Duration,
    /// Long memory shared by sessions whose flags use it.
    pub long_memory: Option<Arc<LongMemoryStore>>,
}

impl ServerConfig {
    pub fn new(spec: RunSpec, cases: Vec<SurgicalCase>) -> Self {
        ServerConfig {
            spec,
            cases,
            token: None,
            pace: DEFAULT_PACE,
            human_timeout: DEFAULT_HUMAN_TIMEOUT,
            long_memory: None,
        }
    }
}

/// Shared handler state.
#[derive(Debug, Clone)]
pub struct AppState {
    pub config: Arc<ServerConfig>,
    sessions: Arc<RwLock<HashMap<String, SessionHandle>>>,
    runs: Arc<RwLock<HashMap<String, Arc<Mutex<api::EvalRunView>>>>>,
}

impl AppState {
    pub fn new(mut config: ServerConfig) -> Self {
        config.cases.sort_by(|a, b| a.case_id.cmp(&b.case_id));
        config.cases.dedup_by(|a, b| a.case_id == b.case_id);
        AppState {
            config: Arc::new(config),
            sessions: Arc::default(),
            runs: Arc::default(),
        }
    }

    pub fn case(&self, case_id: &str) -> Option<&SurgicalCase> {
        self.config
            .cases
            .binary_search_by(|c| c.case_id.as_str().cmp(case_id))
            .ok()
            .map(|i| &self.config.cases[i])
    }

    pub fn session(&self, id: &str) -> Result<SessionHandle, ApiError> {
        self.sessions
            .read()
            .expect("sessions lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::unknown_session(id))
    }

    fn insert_session(&self, handle: SessionHandle) {
        self.sessions.write().expect("sessions lock").insert(handle.id.clone(), handle);
    }

    fn session_list(&self) -> Vec<SessionHandle> {
        self.sessions.read().expect("sessions lock").values().cloned().collect()
    }
}

/// Serves the API on `listener` until the future is dropped.
pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}
