//! Live backends over HTTP: a chat-completions [`RemoteBackend`] and an
//! embeddings [`RemoteEmbedder`].
//!
//! Both read their endpoint and credentials from the environment, send
//! temperature 0 and the request seed, and retry transient failures twice
//! with exponential backoff before giving up.

use std::time::Duration;

use orsim_core::agent::backend::{BackendError, GenerationBackend, GenerationRequest, MessageTag};
use orsim_core::knowledge::{Embedder, KnowledgeError};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub const ENV_API_BASE: &str = "ORSIM_API_BASE";
pub const ENV_API_KEY: &str = "ORSIM_API_KEY";
pub const ENV_MODEL: &str = "ORSIM_MODEL";
pub const ENV_EMBED_MODEL: &str = "ORSIM_EMBED_MODEL";
pub const ENV_EMBED_DIM: &str = "ORSIM_EMBED_DIM";

pub const DEFAULT_RETRIES: u32 = 2;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("environment variable {0} is not set")]
    MissingVar(&'static str),
    #[error("environment variable {name} is invalid: {message}")]
    InvalidVar { name: &'static str, message: String },
}

impl ConfigError {
    pub fn code(&self) -> &'static str {
        match self {
            ConfigError::MissingVar(_) => "MissingCredentials",
            ConfigError::InvalidVar { .. } => "InvalidConfig",
        }
    }
}

/// Endpoint, credentials and retry policy shared by both clients.
#[derive(Clone, PartialEq, Eq)]
pub struct RemoteConfig {
    /// Base URL without a trailing slash, e.g. `https://host/v1`.
    pub api_base: String,
    pub api_key: String,
    pub model: String,
    pub timeout: Duration,
    pub retries: u32,
    /// Delay before the first retry; doubles on each further attempt.
    pub backoff: Duration,
}

impl std::fmt::Debug for RemoteConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteConfig")
            .field("api_base", &self.api_base)
            .field("api_key", &"<redacted>")
            .field("model", &self.model)
            .field("timeout", &self.timeout)
            .field("retries", &self.retries)
            .field("backoff", &self.backoff)
            .finish()
    }
}

impl RemoteConfig {
    pub fn new(api_base: impl Into<String>, api_key: impl Into<String>, model: impl Into<String>) -> Self {
        RemoteConfig {
            api_base: api_base.into().trim_end_matches('/').to_string(),
            api_key: api_key.into(),
            model: model.into(),
            timeout: Duration::from_secs(60),
            retries: DEFAULT_RETRIES,
            backoff: Duration::from_millis(500),
        }
    }

    /// Reads `ORSIM_API_BASE`, `ORSIM_API_KEY` and `ORSIM_MODEL`.
    pub fn from_env() -> Result<Self, ConfigError> {
        Self::from_lookup(|k| std::env::var(k).ok())
    }

    pub fn from_lookup(get: impl Fn(&str) -> Option<String>) -> Result<Self, ConfigError> {
        let need = |name: &'static str| {
            get(name)
                .map(|v| v.trim().to_string())
                .filter(|v| !v.is_empty())
                .ok_or(ConfigError::MissingVar(name))
        };
        let base = need(ENV_API_BASE)?;
        if !(base.starts_with("http://") || base.starts_with("https://")) {
            return Err(ConfigError::InvalidVar {
                name: ENV_API_BASE,
                message: format!("`{base}` is not an http(s) URL"),
            });
        }
        Ok(RemoteConfig::new(base, need(ENV_API_KEY)?, need(ENV_MODEL)?))
    }

    /// True when every variable `from_env` needs is set.
    pub fn env_present() -> bool {
        [ENV_API_BASE, ENV_API_KEY, ENV_MODEL]
            .iter()
            .all(|k| std::env::var(k).map(|v| !v.trim().is_empty()).unwrap_or(false))
    }

    fn agent(&self) -> ureq::Agent {
        ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .http_status_as_error(false)
            .build()
            .into()
    }
}

#[derive(Debug, Serialize)]
struct ChatMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Debug, Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f32,
    max_tokens: u32,
    seed: u64,
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    #[serde(default)]
    choices: Vec<ChatChoice>,
}

#[derive(Debug, Deserialize)]
struct ChatChoice {
    message: Option<ChatReply>,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Debug, Deserialize)]
struct ChatReply {
    #[serde(default)]
    content: Option<String>,
    #[serde(default)]
    refusal: Option<String>,
}

/// Tokens requested per reply. Turns are short; the prompt budget is
/// enforced separately in characters.
const REPLY_TOKENS: u32 = 512;

fn wire_role(tag: MessageTag) -> &'static str {
    match tag {
        MessageTag::System => "system",
        MessageTag::RoleContext | MessageTag::Dialogue => "user",
    }
}

fn map_transport(e: ureq::Error) -> BackendError {
    match e {
        ureq::Error::Timeout(t) => BackendError::Timeout(t.to_string()),
        other => BackendError::Transport(other.to_string()),
    }
}

/// Sends one JSON POST and returns the parsed body of a 2xx response.
fn post_json<B: Serialize>(agent: &ureq::Agent, cfg: &RemoteConfig, path: &str, body: &B) -> Result<Value, BackendError> {
    let url = format!("{}{path}", cfg.api_base);
    let mut resp = agent
        .post(&url)
        .header("Authorization", &format!("Bearer {}", cfg.api_key))
        .send_json(body)
        .map_err(map_transport)?;
    let status = resp.status().as_u16();
    let text = resp.body_mut().read_to_string().map_err(map_transport)?;
    if !(200..300).contains(&status) {
        let mut body = text;
        body.truncate(400);
        return Err(BackendError::Status { status, body });
    }
    serde_json::from_str(&text).map_err(|e| BackendError::Transport(format!("malformed response body: {e}")))
}

/// Runs `op` once plus up to `retries` more times while failures are
/// transient, sleeping `backoff * 2^i` before retry `i`.
pub fn with_retries<T>(
    retries: u32,
    backoff: Duration,
    mut op: impl FnMut() -> Result<T, BackendError>,
) -> Result<T, BackendError> {
    let mut attempt = 0;
    loop {
        match op() {
            Ok(v) => return Ok(v),
            Err(e) if e.is_transient() && attempt < retries => {
                let delay = backoff.saturating_mul(1 << attempt.min(16));
                tracing::warn!(attempt, ?delay, error = %e, "retrying backend call");
                std::thread::sleep(delay);
                attempt += 1;
            }
            Err(e) => return Err(e),
        }
    }
}

/// Chat-completions client. Safe to share across simulations.
#[derive(Debug, Clone)]
pub struct RemoteBackend {
    cfg: RemoteConfig,
    agent: ureq::Agent,
}

impl RemoteBackend {
    pub fn new(cfg: RemoteConfig) -> Self {
        let agent = cfg.agent();
        RemoteBackend { cfg, agent }
    }

    pub fn from_env() -> Result<Self, ConfigError> {
        RemoteConfig::from_env().map(Self::new)
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.cfg
    }
}

impl GenerationBackend for RemoteBackend {
    fn id(&self) -> String {
        format!("remote:{}", self.cfg.model)
    }

    fn generate(&self, req: &GenerationRequest) -> Result<String, BackendError> {
        let body = ChatRequest {
            model: &self.cfg.model,
            messages: req
                .messages
                .iter()
                .map(|m| ChatMessage {
                    role: wire_role(m.tag),
                    content: &m.text,
                })
                .collect(),
            temperature: req.params.temperature,
            max_tokens: REPLY_TOKENS,
            seed: req.params.seed,
        };
        let value = with_retries(self.cfg.retries, self.cfg.backoff, || {
            post_json(&self.agent, &self.cfg, "/chat/completions", &body)
        })?;
        let resp: ChatResponse =
            serde_json::from_value(value).map_err(|e| BackendError::Transport(format!("unexpected response shape: {e}")))?;
        let choice = resp
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::Refusal("response has no choices".into()))?;
        if choice.finish_reason.as_deref() == Some("content_filter") {
            return Err(BackendError::Refusal("content filter".into()));
        }
        let reply = choice.message.ok_or_else(|| BackendError::Refusal("choice has no message".into()))?;
        if let Some(r) = reply.refusal.filter(|r| !r.is_empty()) {
            return Err(BackendError::Refusal(r));
        }
        reply
            .content
            .filter(|c| !c.trim().is_empty())
            .ok_or_else(|| BackendError::Refusal("empty reply".into()))
    }
}

#[derive(Debug, Serialize)]
struct EmbedRequest<'a> {
    model: &'a str,
    input: &'a str,
}

#[derive(Debug, Deserialize)]
struct EmbedResponse {
    data: Vec<EmbedDatum>,
}

#[derive(Debug, Deserialize)]
struct EmbedDatum {
    embedding: Vec<f32>,
}

/// Embeddings client with a fixed, declared dimension.
#[derive(Debug, Clone)]
pub struct RemoteEmbedder {
    cfg: RemoteConfig,
    agent: ureq::Agent,
    dim: usize,
}

impl RemoteEmbedder {
    pub fn new(cfg: RemoteConfig, dim: usize) -> Self {
        let agent = cfg.agent();
        RemoteEmbedder { cfg, agent, dim }
    }

    /// Uses `ORSIM_EMBED_MODEL` (falling back to `ORSIM_MODEL`) and
    /// `ORSIM_EMBED_DIM` (default 1536).
    pub fn from_env() -> Result<Self, ConfigError> {
        let mut cfg = RemoteConfig::from_env()?;
        if let Ok(m) = std::env::var(ENV_EMBED_MODEL) {
            if !m.trim().is_empty() {
                cfg.model = m.trim().to_string();
            }
        }
        let dim = match std::env::var(ENV_EMBED_DIM) {
            Ok(v) => v.trim().parse::<usize>().ok().filter(|d| *d > 0).ok_or(ConfigError::InvalidVar {
                name: ENV_EMBED_DIM,
                message: format!("`{v}` is not a positive integer"),
            })?,
            Err(_) => 1536,
        };
        Ok(Self::new(cfg, dim))
    }
}

impl Embedder for RemoteEmbedder {
    fn id(&self) -> String {
        format!("remote:{}:{}", self.cfg.model, self.dim)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>, KnowledgeError> {
        let body = EmbedRequest {
            model: &self.cfg.model,
            input: text,
        };
        let value = with_retries(self.cfg.retries, self.cfg.backoff, || {
            post_json(&self.agent, &self.cfg, "/embeddings", &body)
        })
        .map_err(|e| KnowledgeError::Embedder(e.to_string()))?;
        let resp: EmbedResponse = serde_json::from_value(value)
            .map_err(|e| KnowledgeError::Embedder(format!("unexpected response shape: {e}")))?;
        let v = resp
            .data
            .into_iter()
            .next()
            .ok_or_else(|| KnowledgeError::Embedder("response has no data".into()))?
            .embedding;
        if v.len() != self.dim {
            return Err(KnowledgeError::DimensionMismatch {
                expected: self.dim,
                got: v.len(),
            });
        }
        Ok(v)
    }
}
