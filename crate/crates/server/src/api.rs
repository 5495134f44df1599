//! Routes, request bodies and handlers.

use std::convert::Infallible;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, Request, State};
use axum::http::{HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream};
use orsim_core::copilot::{CopilotAnswer, LongMemoryStore};
use orsim_core::domain::{DiseaseLabel, RoleId, RouteLabel, SurgicalCase, Utterance};
use orsim_core::eval::tables::render_report;
use orsim_core::eval::{AblationFlags, EvalConfig, EvalReport};
use orsim_core::records::parse_case;
use orsim_core::runner::run_eval;
use orsim_core::workflow::{SimConfig, SimulatedReport};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::error::ApiError;
use crate::session::{EventLog, Mode, SessionHandle, SessionSettings, SessionView, StreamEvent, TickOutcome};
use crate::{AppState, MAX_TICK_TURNS};

pub fn router(state: AppState) -> Router {
    let api = Router::new()
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/events", get(stream_events))
        .route("/sessions/{id}/tick", post(tick))
        .route("/sessions/{id}/takeover", post(take_over))
        .route("/sessions/{id}/input", post(submit_input))
        .route("/sessions/{id}/copilot/query", post(copilot_query))
        .route("/sessions/{id}/finalize", post(finalize))
        .route("/eval/runs", post(start_eval))
        .route("/eval/runs/{id}", get(get_eval))
        .route("/cases", get(list_cases))
        .route("/cases/{id}", get(get_case))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    Router::new()
        .route("/health", get(|| async { Json(serde_json::json!({"status": "ok"})) }))
        .merge(api)
        .fallback(|| async { ApiError::new("NotFound", "no such route") })
        .with_state(state)
}

#[derive(Debug, Deserialize)]
struct TokenQuery {
    token: Option<String>,
}

/// Accepts `Authorization: Bearer <token>` or, for event streams opened
/// by browsers, a `token` query parameter.
async fn require_token(
    State(state): State<AppState>,
    Query(q): Query<TokenQuery>,
    headers: HeaderMap,
    req: Request,
    next: Next,
) -> Response {
    if let Some(expected) = &state.config.token {
        let bearer = headers
            .get("authorization")
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        let given = bearer.or(q.token.as_deref());
        if given != Some(expected.as_str()) {
            return ApiError::new("Unauthorized", "missing or wrong bearer token").into_response();
        }
    }
    next.run(req).await
}

/// Parses a JSON body; an empty body reads as `{}`.
fn parse_body<T: DeserializeOwned>(bytes: &Bytes) -> Result<T, ApiError> {
    let raw: &[u8] = if bytes.iter().all(u8::is_ascii_whitespace) { b"{}" } else { bytes };
    serde_json::from_slice(raw).map_err(|e| ApiError::new("BadRequest", format!("invalid body: {e}")))
}

fn parse_role(raw: &str) -> Result<RoleId, ApiError> {
    serde_json::from_value(serde_json::Value::String(raw.to_string()))
        .map_err(|_| ApiError::new("RoleUnavailable", format!("unknown role `{raw}`")))
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub case_id: Option<String>,
    /// Inline case document, validated like a case file.
    pub case: Option<serde_json::Value>,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub seed: u64,
    /// Ablation preset name; defaults to `full`.
    pub preset: Option<String>,
    pub pace_ms: Option<u64>,
    pub human_timeout_ms: Option<u64>,
}

fn flags_for(preset: Option<&str>) -> Result<AblationFlags, ApiError> {
    let name = preset.unwrap_or("full");
    AblationFlags::preset(name).ok_or_else(|| ApiError::invalid_config(format!("unknown preset `{name}`")))
}

fn positive_ms(v: Option<u64>, default: Duration, what: &str) -> Result<Duration, ApiError> {
    match v {
        None => Ok(default),
        Some(0) => Err(ApiError::invalid_config(format!("{what} must be positive"))),
        Some(ms) => Ok(Duration::from_millis(ms)),
    }
}

async fn create_session(State(state): State<AppState>, body: Bytes) -> Result<(StatusCode, Json<SessionView>), ApiError> {
    let req: CreateSession = parse_body(&body)?;
    let case: SurgicalCase = match (&req.case_id, &req.case) {
        (Some(id), None) => state
            .case(id)
            .cloned()
            .ok_or_else(|| ApiError::new("UnknownCase", format!("no case `{id}`")))?,
        (None, Some(doc)) => parse_case(&doc.to_string(), &state.config.spec.vocab, "inline case")
            .map_err(|e| ApiError::new("InvalidCase", e.to_string()))?,
        _ => return Err(ApiError::invalid_config("give exactly one of case_id and case")),
    };
    let settings = SessionSettings {
        mode: req.mode,
        pace: positive_ms(req.pace_ms, state.config.pace, "pace_ms")?,
        human_timeout: positive_ms(req.human_timeout_ms, state.config.human_timeout, "human_timeout_ms")?,
    };
    let spec = state
        .config
        .spec
        .with_config(SimConfig::with_flags(flags_for(req.preset.as_deref())?));
    let id = Uuid::new_v4().simple().to_string();
    let sim = spec.create(case, req.seed, Some(format!("session-{id}")), state.config.long_memory.as_ref())?;
    let handle = SessionHandle::spawn(id, sim, settings);
    let view = handle.view();
    tracing::info!(session = %handle.id, case = %view.case_id, mode = ?settings.mode, "session created");
    state.insert_session(handle);
    Ok((StatusCode::CREATED, Json(view)))
}

async fn list_sessions(State(state): State<AppState>) -> Json<Vec<SessionView>> {
    let mut views: Vec<SessionView> = state.session_list().iter().map(SessionHandle::view).collect();
    views.sort_by(|a, b| a.session_id.cmp(&b.session_id));
    for v in &mut views {
        v.report = None;
    }
    Json(views)
}

async fn get_session(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<SessionView>, ApiError> {
    Ok(Json(state.session(&id)?.view()))
}

#[derive(Debug, Deserialize)]
pub struct EventsQuery {
    pub from_seq: Option<u64>,
}

/// Streams the session log from `from_seq` (default 0), then follows it
/// live; the stream ends once the session is finalized and drained.
/// A reconnecting browser's `Last-Event-ID` resumes after that event.
async fn stream_events(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<EventsQuery>,
    headers: HeaderMap,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    let handle = state.session(&id)?;
    let resume = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.trim().parse::<u64>().ok())
        .map(|last| last + 1);
    let from = q.from_seq.or(resume).unwrap_or(0);
    Ok(Sse::new(follow(handle.log.clone(), from)).keep_alive(KeepAlive::new().interval(Duration::from_secs(15))))
}

fn to_sse(ev: &StreamEvent) -> Event {
    Event::default()
        .id(ev.seq.to_string())
        .event(ev.kind.name())
        .data(serde_json::to_string(ev).expect("stream events serialize"))
}

fn follow(log: Arc<EventLog>, from: u64) -> impl Stream<Item = Result<Event, Infallible>> {
    let rx = log.subscribe();
    let buf: std::vec::IntoIter<StreamEvent> = Vec::new().into_iter();
    stream::unfold((log, rx, from, buf), |(log, mut rx, mut cursor, mut buf)| async move {
        loop {
            if let Some(ev) = buf.next() {
                cursor = ev.seq + 1;
                return Some((Ok(to_sse(&ev)), (log, rx, cursor, buf)));
            }
            let (events, closed) = log.since(cursor);
            if !events.is_empty() {
                buf = events.into_iter();
                continue;
            }
            if closed || rx.changed().await.is_err() {
                return None;
            }
        }
    })
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TickBody {
    turns: Option<usize>,
}

async fn tick(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> Result<Json<TickOutcome>, ApiError> {
    let handle = state.session(&id)?;
    let req: TickBody = parse_body(&body)?;
    let turns = req.turns.unwrap_or(1);
    if turns == 0 || turns > MAX_TICK_TURNS {
        return Err(ApiError::invalid_config(format!("turns must be in 1..={MAX_TICK_TURNS}")));
    }
    Ok(Json(handle.tick(turns).await?))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TakeOverBody {
    role: String,
}

async fn take_over(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> Result<Json<SessionView>, ApiError> {
    let handle = state.session(&id)?;
    let req: TakeOverBody = parse_body(&body)?;
    Ok(Json(handle.take_over(parse_role(&req.role)?).await?))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct InputBody {
    role: String,
    text: String,
}

async fn submit_input(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> Result<Json<Utterance>, ApiError> {
    let handle = state.session(&id)?;
    let req: InputBody = parse_body(&body)?;
    if req.text.trim().is_empty() {
        return Err(ApiError::new("BadRequest", "text is empty"));
    }
    Ok(Json(handle.input(parse_role(&req.role)?, req.text).await?))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct QueryBody {
    question: String,
}

async fn copilot_query(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<CopilotAnswer>, ApiError> {
    let handle = state.session(&id)?;
    let req: QueryBody = parse_body(&body)?;
    Ok(Json(handle.query(req.question).await?))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FinalizeBody {
    #[serde(default)]
    force: bool,
}

async fn finalize(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<SimulatedReport>, ApiError> {
    let handle = state.session(&id)?;
    let req: FinalizeBody = parse_body(&body)?;
    Ok(Json(handle.finalize(req.force).await?))
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct StartEval {
    /// Defaults to every served case.
    pub case_ids: Option<Vec<String>>,
    pub preset: Option<String>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRunView {
    pub run_id: String,
    pub status: RunStatus,
    pub preset: String,
    pub seed: u64,
    pub case_ids: Vec<String>,
    pub report: Option<EvalReport>,
    /// Rendered tables of the finished report.
    pub table: Option<String>,
    pub error: Option<crate::error::ErrorDetail>,
}

async fn start_eval(State(state): State<AppState>, body: Bytes) -> Result<(StatusCode, Json<EvalRunView>), ApiError> {
    let req: StartEval = parse_body(&body)?;
    let preset = req.preset.clone().unwrap_or_else(|| "full".into());
    let flags = flags_for(Some(&preset))?;
    let cases: Vec<SurgicalCase> = match &req.case_ids {
        None => state.config.cases.clone(),
        Some(ids) => ids
            .iter()
            .map(|id| {
                state
                    .case(id)
                    .cloned()
                    .ok_or_else(|| ApiError::new("UnknownCase", format!("no case `{id}`")))
            })
            .collect::<Result<_, _>>()?,
    };
    if cases.is_empty() {
        return Err(ApiError::invalid_config("no cases to evaluate"));
    }
    let run_id = Uuid::new_v4().simple().to_string();
    let mut case_ids: Vec<String> = cases.iter().map(|c| c.case_id.clone()).collect();
    case_ids.sort();
    let view = Arc::new(Mutex::new(EvalRunView {
        run_id: run_id.clone(),
        status: RunStatus::Running,
        preset: preset.clone(),
        seed: req.seed,
        case_ids,
        report: None,
        table: None,
        error: None,
    }));
    state.runs.write().expect("runs lock").insert(run_id.clone(), view.clone());
    let spec = state.config.spec.with_config(SimConfig::with_flags(flags));
    let slot = view.clone();
    tokio::task::spawn_blocking(move || {
        // A fresh store per run keeps evaluation results reproducible.
        let store = Arc::new(LongMemoryStore::in_memory());
        let outcome = run_eval(&spec, &cases, req.seed, &EvalConfig::default(), Some(store));
        let mut v = slot.lock().expect("run lock");
        match outcome {
            Ok(run) => {
                v.table = Some(render_report(&preset, &run.report));
                v.report = Some(run.report);
                v.status = RunStatus::Done;
            }
            Err(e) => {
                v.error = Some(ApiError::new(e.code(), e.to_string()).body().error);
                v.status = RunStatus::Failed;
            }
        }
        tracing::info!(run = %v.run_id, status = ?v.status, "eval run finished");
    });
    let snapshot = view.lock().expect("run lock").clone();
    Ok((StatusCode::ACCEPTED, Json(snapshot)))
}

async fn get_eval(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<EvalRunView>, ApiError> {
    let runs = state.runs.read().expect("runs lock");
    let run = runs
        .get(&id)
        .ok_or_else(|| ApiError::new("UnknownRun", format!("no eval run `{id}`")))?;
    let view = run.lock().expect("run lock").clone();
    Ok(Json(view))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseSummary {
    pub case_id: String,
    pub disease: DiseaseLabel,
    pub gold_route: RouteLabel,
    pub summary: String,
}

async fn list_cases(State(state): State<AppState>) -> Json<Vec<CaseSummary>> {
    Json(
        state
            .config
            .cases
            .iter()
            .map(|c| CaseSummary {
                case_id: c.case_id.clone(),
                disease: c.disease_label.clone(),
                gold_route: c.gold_route.clone(),
                summary: c.summary(),
            })
            .collect(),
    )
}

async fn get_case(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<SurgicalCase>, ApiError> {
    state
        .case(&id)
        .cloned()
        .map(Json)
        .ok_or_else(|| ApiError::new("UnknownCase", format!("no case `{id}`")))
}
