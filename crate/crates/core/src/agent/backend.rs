//! Text-generation backends.
//!
//! [`ScriptedBackend`] is a deterministic rule table used for tests, batch
//! runs and the browser demo. Live HTTP backends implement the same trait
//! in a separate crate.

use std::collections::BTreeMap;

use regex::{Regex, RegexBuilder};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{PhaseId, RoleId};
use crate::knowledge::fnv1a64;

pub const RULES_FORMAT_VERSION: &str = "1.0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MessageTag {
    System,
    RoleContext,
    Dialogue,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub tag: MessageTag,
    pub text: String,
}

impl Message {
    pub fn new(tag: MessageTag, text: impl Into<String>) -> Self {
        Message {
            tag,
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    /// Budget for the assembled prompt, in characters.
    pub max_length: usize,
    pub temperature: f32,
    pub seed: u64,
}

impl Default for GenerationParams {
    fn default() -> Self {
        GenerationParams {
            max_length: 12_000,
            temperature: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub role: RoleId,
    pub phase: PhaseId,
    pub messages: Vec<Message>,
    pub params: GenerationParams,
    /// Template variables for rule tables; remote backends ignore them.
    #[serde(default)]
    pub vars: BTreeMap<String, String>,
}

impl GenerationRequest {
    pub fn prompt_text(&self) -> String {
        let mut out = String::new();
        for m in &self.messages {
            out.push_str(&m.text);
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("backend timed out: {0}")]
    Timeout(String),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("backend refused: {0}")]
    Refusal(String),
    #[error("backend returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("backend misconfigured: {0}")]
    Config(String),
}

impl BackendError {
    /// Whether a retry can reasonably succeed.
    pub fn is_transient(&self) -> bool {
        match self {
            BackendError::Timeout(_) | BackendError::Transport(_) => true,
            BackendError::Status { status, .. } => *status == 429 || *status >= 500,
            BackendError::Refusal(_) | BackendError::Config(_) => false,
        }
    }
}

pub trait GenerationBackend: Send + Sync {
    /// Stable identifier recorded in report fingerprints.
    fn id(&self) -> String;
    fn generate(&self, req: &GenerationRequest) -> Result<String, BackendError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rule {
    #[serde(default)]
    pub id: Option<String>,
    #[serde(default)]
    pub role: Option<RoleId>,
    #[serde(default)]
    pub phase: Option<PhaseId>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub phases: Vec<PhaseId>,
    #[serde(default)]
    pub pattern: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub patterns: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unless: Vec<String>,
    pub replies: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleTable {
    #[serde(default = "default_version")]
    pub format_version: String,
    pub fallback: String,
    #[serde(default = "default_idle")]
    pub idle: String,
    #[serde(default, rename = "rule")]
    pub rules: Vec<Rule>,
}

fn default_version() -> String {
    RULES_FORMAT_VERSION.to_string()
}

fn default_idle() -> String {
    "{role_name} is standing by.".to_string()
}

#[derive(Debug, Error)]
pub enum RuleTableError {
    #[error("rule table parse error: {0}")]
    Parse(String),
    #[error("rule {index}: {message}")]
    Invalid { index: usize, message: String },
    #[error("{0}")]
    Version(String),
}

struct CompiledRule {
    role: Option<RoleId>,
    phases: Vec<PhaseId>,
    all: Vec<Regex>,
    none: Vec<Regex>,
    replies: Vec<String>,
}

impl CompiledRule {
    fn applies(&self, req: &GenerationRequest, prompt: &str) -> bool {
        self.role.is_none_or(|r| r == req.role)
            && (self.phases.is_empty() || self.phases.contains(&req.phase))
            && self.all.iter().all(|re| re.is_match(prompt))
            && !self.none.iter().any(|re| re.is_match(prompt))
    }
}

/// Deterministic rule-table generator: the first rule whose role, phase
/// and patterns match the prompt answers; otherwise the fallback template.
pub struct ScriptedBackend {
    table: RuleTable,
    compiled: Vec<CompiledRule>,
    id: String,
}

impl std::fmt::Debug for ScriptedBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScriptedBackend")
            .field("id", &self.id)
            .field("rules", &self.compiled.len())
            .finish()
    }
}

fn compile(pattern: &str, index: usize) -> Result<Regex, RuleTableError> {
    RegexBuilder::new(pattern)
        .case_insensitive(true)
        .build()
        .map_err(|e| RuleTableError::Invalid {
            index,
            message: e.to_string(),
        })
}

impl ScriptedBackend {
    pub fn new(table: RuleTable) -> Result<Self, RuleTableError> {
        crate::records::check_version(&table.format_version, RULES_FORMAT_VERSION)
            .map_err(|e| RuleTableError::Version(e.to_string()))?;
        let mut compiled = Vec::with_capacity(table.rules.len());
        for (index, rule) in table.rules.iter().enumerate() {
            if rule.replies.is_empty() {
                return Err(RuleTableError::Invalid {
                    index,
                    message: "a rule needs at least one reply".into(),
                });
            }
            let mut phases = rule.phases.clone();
            phases.extend(rule.phase);
            let mut all = Vec::new();
            for p in rule.pattern.iter().chain(&rule.patterns) {
                all.push(compile(p, index)?);
            }
            let mut none = Vec::new();
            for p in &rule.unless {
                none.push(compile(p, index)?);
            }
            compiled.push(CompiledRule {
                role: rule.role,
                phases,
                all,
                none,
                replies: rule.replies.clone(),
            });
        }
        // Hash of the serialized table, so fingerprints change with rules.
        let digest = fnv1a64(
            toml::to_string(&table)
                .unwrap_or_default()
                .as_bytes(),
        );
        Ok(ScriptedBackend {
            table,
            compiled,
            id: format!("scripted-{digest:016x}"),
        })
    }

    pub fn from_toml_str(s: &str) -> Result<Self, RuleTableError> {
        let table: RuleTable = toml::from_str(s).map_err(|e| RuleTableError::Parse(e.to_string()))?;
        Self::new(table)
    }

    pub fn table(&self) -> &RuleTable {
        &self.table
    }

    /// Index of the rule answering `req`, if any.
    pub fn matching_rule(&self, req: &GenerationRequest) -> Option<usize> {
        let prompt = req.prompt_text();
        self.compiled.iter().position(|r| r.applies(req, &prompt))
    }
}

impl GenerationBackend for ScriptedBackend {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn generate(&self, req: &GenerationRequest) -> Result<String, BackendError> {
        let prompt = req.prompt_text();
        let template = match self.compiled.iter().find(|r| r.applies(req, &prompt)) {
            Some(rule) => {
                let mut key = req.params.seed.to_le_bytes().to_vec();
                key.extend_from_slice(prompt.as_bytes());
                let idx = (fnv1a64(&key) % rule.replies.len() as u64) as usize;
                rule.replies[idx].as_str()
            }
            None => self.table.fallback.as_str(),
        };
        let rendered = render_template(template, &req.vars);
        if rendered.trim().is_empty() {
            return Ok(render_template(&self.table.idle, &req.vars));
        }
        Ok(rendered)
    }
}

/// Substitutes `{name}` placeholders. A line that references a missing or
/// empty variable is dropped entirely.
pub fn render_template(template: &str, vars: &BTreeMap<String, String>) -> String {
    let mut lines = Vec::new();
    'line: for line in template.lines() {
        let mut out = String::with_capacity(line.len());
        let mut rest = line;
        while let Some(open) = rest.find('{') {
            let Some(close) = rest[open..].find('}') else {
                break;
            };
            let name = &rest[open + 1..open + close];
            let valid = !name.is_empty()
                && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_');
            out.push_str(&rest[..open]);
            if valid {
                match vars.get(name) {
                    Some(v) if !v.is_empty() => out.push_str(v),
                    _ => continue 'line,
                }
            } else {
                out.push_str(&rest[open..=open + close]);
            }
            rest = &rest[open + close + 1..];
        }
        out.push_str(rest);
        lines.push(out);
    }
    lines.join("\n").trim().to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(role: RoleId, phase: PhaseId, text: &str) -> GenerationRequest {
        GenerationRequest {
            role,
            phase,
            messages: vec![Message::new(MessageTag::RoleContext, text)],
            params: GenerationParams::default(),
            vars: BTreeMap::from([("role_name".to_string(), role.display_name().to_string())]),
        }
    }

    const TABLE: &str = r#"
fallback = "{role_name}: nothing scripted."

[[rule]]
role = "scrub_nurse"
phase = "preparation"
pattern = "instruments"
replies = ["Instrument tray ready: all sets counted."]

[[rule]]
role = "chief_surgeon"
patterns = ["route", "adenoma"]
unless = ["craniotomy"]
replies = ["Go endonasal."]
"#;

    #[test]
    fn rule_table_echo() {
        let b = ScriptedBackend::from_toml_str(TABLE).unwrap();
        let out = b
            .generate(&req(RoleId::ScrubNurse, PhaseId::Preparation, "Check the instruments"))
            .unwrap();
        assert!(out.starts_with("Instrument tray ready:"));
        // same role, other phase → fallback
        let out = b
            .generate(&req(RoleId::ScrubNurse, PhaseId::Anesthesia, "Check the instruments"))
            .unwrap();
        assert_eq!(out, "Scrub Nurse: nothing scripted.");
    }

    #[test]
    fn all_patterns_and_unless() {
        let b = ScriptedBackend::from_toml_str(TABLE).unwrap();
        let chief = |t: &str| {
            b.generate(&req(RoleId::ChiefSurgeon, PhaseId::PatientTransfer, t))
                .unwrap()
        };
        assert_eq!(chief("Route for this ADENOMA?"), "Go endonasal.");
        assert_eq!(chief("route only"), "Chief Surgeon: nothing scripted.");
        assert_eq!(
            chief("route adenoma craniotomy"),
            "Chief Surgeon: nothing scripted."
        );
    }

    #[test]
    fn template_drops_lines_with_empty_vars() {
        let vars = BTreeMap::from([
            ("a".to_string(), "x".to_string()),
            ("b".to_string(), String::new()),
        ]);
        assert_eq!(render_template("one {a}\ntwo {b}\nthree {c}\n{not a var}", &vars), "one x\n{not a var}");
    }

    #[test]
    fn bad_regex_is_reported() {
        let bad = "fallback = \"x\"\n[[rule]]\npattern = \"(\"\nreplies = [\"y\"]\n";
        assert!(matches!(
            ScriptedBackend::from_toml_str(bad),
            Err(RuleTableError::Invalid { index: 0, .. })
        ));
    }

    #[test]
    fn id_tracks_table_contents() {
        let a = ScriptedBackend::from_toml_str(TABLE).unwrap();
        let b = ScriptedBackend::from_toml_str(&TABLE.replace("Go endonasal.", "Go.")).unwrap();
        assert_ne!(a.id(), b.id());
        assert_eq!(a.id(), ScriptedBackend::from_toml_str(TABLE).unwrap().id());
    }
}
