//! Test harness: a server on an ephemeral port and a blocking client.

#![allow(dead_code)]

use std::io::{BufRead, BufReader};
use std::time::{Duration, Instant};

use orsim_core::fixtures;
use orsim_core::runner::RunSpec;
use orsim_core::synth::{generate_synthetic_cases, uniform_mix};
use orsim_core::workflow::SimConfig;
use orsim_server::{AppState, ServerConfig, StreamEvent};
use serde_json::Value;

pub fn config() -> ServerConfig {
    let vocab = fixtures::vocabulary();
    let mut cases = generate_synthetic_cases(4, 11, &uniform_mix(), &vocab).unwrap();
    cases.push(fixtures::case01());
    ServerConfig::new(RunSpec::fixture(SimConfig::default()), cases)
}

/// Starts the service on its own runtime thread and returns the base URL.
pub fn start(config: ServerConfig) -> Client {
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            orsim_server::serve(listener, AppState::new(config)).await.unwrap();
        });
    });
    let addr = rx.recv().unwrap();
    Client {
        base: format!("http://{addr}"),
        token: None,
        agent: ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(60)))
            .build()
            .into(),
    }
}

#[derive(Clone)]
pub struct Client {
    pub base: String,
    pub token: Option<String>,
    agent: ureq::Agent,
}

impl Client {
    pub fn with_token(&self, token: Option<&str>) -> Client {
        Client {
            token: token.map(str::to_string),
            ..self.clone()
        }
    }

    fn auth(&self) -> Option<String> {
        self.token.as_ref().map(|t| format!("Bearer {t}"))
    }

    pub fn get(&self, path: &str) -> (u16, Value) {
        let mut req = self.agent.get(&format!("{}{path}", self.base));
        if let Some(a) = self.auth() {
            req = req.header("Authorization", &a);
        }
        let mut resp = req.call().unwrap();
        let status = resp.status().as_u16();
        (status, resp.body_mut().read_json().unwrap_or(Value::Null))
    }

    pub fn post(&self, path: &str, body: Value) -> (u16, Value) {
        self.post_raw(path, &body.to_string())
    }

    pub fn post_raw(&self, path: &str, body: &str) -> (u16, Value) {
        let mut req = self
            .agent
            .post(&format!("{}{path}", self.base))
            .header("Content-Type", "application/json");
        if let Some(a) = self.auth() {
            req = req.header("Authorization", &a);
        }
        let mut resp = req.send(body).unwrap();
        let status = resp.status().as_u16();
        (status, resp.body_mut().read_json().unwrap_or(Value::Null))
    }

    /// Creates a session and returns its id.
    pub fn create(&self, body: Value) -> String {
        let (status, v) = self.post("/sessions", body);
        assert_eq!(status, 201, "{v}");
        v["session_id"].as_str().unwrap().to_string()
    }

    /// Reads a session's event stream until it ends or `limit` events.
    pub fn events(&self, id: &str, from_seq: Option<u64>, limit: usize) -> Vec<StreamEvent> {
        let mut url = format!("{}/sessions/{id}/events", self.base);
        if let Some(s) = from_seq {
            url.push_str(&format!("?from_seq={s}"));
        }
        let mut req = self.agent.get(&url);
        if let Some(a) = self.auth() {
            req = req.header("Authorization", &a);
        }
        let resp = req.call().unwrap();
        assert_eq!(resp.status().as_u16(), 200);
        let reader = BufReader::new(resp.into_body().into_reader());
        let mut out = Vec::new();
        for line in reader.lines() {
            let line = line.unwrap();
            if let Some(data) = line.strip_prefix("data:") {
                out.push(serde_json::from_str(data.trim()).unwrap());
                if out.len() >= limit {
                    break;
                }
            }
        }
        out
    }

    /// Polls the session until `pred` holds or the deadline passes.
    pub fn wait_for(&self, id: &str, timeout: Duration, pred: impl Fn(&Value) -> bool) -> Value {
        let start = Instant::now();
        loop {
            let (_, v) = self.get(&format!("/sessions/{id}"));
            if pred(&v) {
                return v;
            }
            assert!(start.elapsed() < timeout, "timed out waiting; last view {v}");
            std::thread::sleep(Duration::from_millis(20));
        }
    }
}

pub fn code(v: &Value) -> &str {
    v["error"]["code"].as_str().unwrap_or("<none>")
}
