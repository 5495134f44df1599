//! Shared vocabulary: roles, phases, cases, utterances and actions.
//!
//! Every type here is plain value data. Serialization formats live in
//! [`crate::records`]; this module only fixes field names and invariants.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::vocab::Taxonomy;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DomainError {
    #[error("route is empty after trimming")]
    EmptyRoute,
    #[error("unknown role `{0}`")]
    UnknownRole(String),
    #[error("unknown phase `{0}`")]
    UnknownPhase(String),
}

impl DomainError {
    pub fn code(&self) -> &'static str {
        match self {
            DomainError::EmptyRoute => "EmptyRoute",
            DomainError::UnknownRole(_) => "UnknownRole",
            DomainError::UnknownPhase(_) => "UnknownPhase",
        }
    }
}

/// Operating-room roles. The set is closed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoleId {
    Patient,
    ChiefSurgeon,
    SurgeonAssistant,
    ScrubNurse,
    WardNurse,
    RoomNurse,
    Anesthetist,
    SurgeryCopilot,
}

impl RoleId {
    pub const ALL: [RoleId; 8] = [
        RoleId::Patient,
        RoleId::ChiefSurgeon,
        RoleId::SurgeonAssistant,
        RoleId::ScrubNurse,
        RoleId::WardNurse,
        RoleId::RoomNurse,
        RoleId::Anesthetist,
        RoleId::SurgeryCopilot,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RoleId::Patient => "patient",
            RoleId::ChiefSurgeon => "chief_surgeon",
            RoleId::SurgeonAssistant => "surgeon_assistant",
            RoleId::ScrubNurse => "scrub_nurse",
            RoleId::WardNurse => "ward_nurse",
            RoleId::RoomNurse => "room_nurse",
            RoleId::Anesthetist => "anesthetist",
            RoleId::SurgeryCopilot => "surgery_copilot",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            RoleId::Patient => "Patient",
            RoleId::ChiefSurgeon => "Chief Surgeon",
            RoleId::SurgeonAssistant => "Surgeon Assistant",
            RoleId::ScrubNurse => "Scrub Nurse",
            RoleId::WardNurse => "Ward Nurse",
            RoleId::RoomNurse => "Room Nurse",
            RoleId::Anesthetist => "Anesthetist",
            RoleId::SurgeryCopilot => "Surgery Copilot",
        }
    }
}

impl fmt::Display for RoleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RoleId {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s
            .trim()
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .map(|c| c.to_ascii_lowercase())
            .collect();
        RoleId::ALL
            .into_iter()
            .find(|r| r.as_str().replace('_', "") == key)
            .ok_or_else(|| DomainError::UnknownRole(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageId {
    Preoperative,
    Intraoperative,
    Postoperative,
}

/// The five phases of an episode, in their fixed order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseId {
    PatientTransfer,
    Anesthesia,
    Preparation,
    SurgicalOperation,
    PostoperativeCare,
}

impl PhaseId {
    pub const ALL: [PhaseId; 5] = [
        PhaseId::PatientTransfer,
        PhaseId::Anesthesia,
        PhaseId::Preparation,
        PhaseId::SurgicalOperation,
        PhaseId::PostoperativeCare,
    ];

    pub fn stage(self) -> StageId {
        match self {
            PhaseId::PatientTransfer | PhaseId::Anesthesia | PhaseId::Preparation => {
                StageId::Preoperative
            }
            PhaseId::SurgicalOperation => StageId::Intraoperative,
            PhaseId::PostoperativeCare => StageId::Postoperative,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn next(self) -> Option<PhaseId> {
        PhaseId::ALL.get(self.index() + 1).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PhaseId::PatientTransfer => "patient_transfer",
            PhaseId::Anesthesia => "anesthesia",
            PhaseId::Preparation => "preparation",
            PhaseId::SurgicalOperation => "surgical_operation",
            PhaseId::PostoperativeCare => "postoperative_care",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            PhaseId::PatientTransfer => "Patient Transfer",
            PhaseId::Anesthesia => "Anesthesia",
            PhaseId::Preparation => "Preparation",
            PhaseId::SurgicalOperation => "Surgical Operation",
            PhaseId::PostoperativeCare => "Postoperative Care",
        }
    }
}

impl fmt::Display for PhaseId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PhaseId {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s
            .trim()
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .map(|c| c.to_ascii_lowercase())
            .collect();
        PhaseId::ALL
            .into_iter()
            .find(|p| p.as_str().replace('_', "") == key)
            .ok_or_else(|| DomainError::UnknownPhase(s.to_string()))
    }
}

/// Canonical taxonomy id of a subtask or plan step, e.g. `prep.drape`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SubtaskId(pub String);

impl SubtaskId {
    pub fn new(id: impl Into<String>) -> Self {
        SubtaskId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for SubtaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for SubtaskId {
    fn from(s: &str) -> Self {
        SubtaskId(s.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MriReport {
    pub findings: String,
    pub impression: String,
    #[serde(default)]
    pub lesion_attributes: BTreeMap<String, String>,
}

/// Disease categories of the evaluation corpus, plus an open extension.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DiseaseLabel {
    D1,
    D2,
    D3,
    D4,
    D5,
    Other(String),
}

impl DiseaseLabel {
    pub const KNOWN: [DiseaseLabel; 5] = [
        DiseaseLabel::D1,
        DiseaseLabel::D2,
        DiseaseLabel::D3,
        DiseaseLabel::D4,
        DiseaseLabel::D5,
    ];

    pub fn code(&self) -> &str {
        match self {
            DiseaseLabel::D1 => "D1",
            DiseaseLabel::D2 => "D2",
            DiseaseLabel::D3 => "D3",
            DiseaseLabel::D4 => "D4",
            DiseaseLabel::D5 => "D5",
            DiseaseLabel::Other(s) => s,
        }
    }

    pub fn name(&self) -> &str {
        match self {
            DiseaseLabel::D1 => "Primary non-functioning pituitary adenoma",
            DiseaseLabel::D2 => "Recurrent nonfunctioning pituitary adenoma",
            DiseaseLabel::D3 => "Aggressive nonfunctioning pituitary adenoma",
            DiseaseLabel::D4 => "Primary pituitary adrenocorticotroph adenoma",
            DiseaseLabel::D5 => "Recurrent pituitary adrenocorticotroph adenoma",
            DiseaseLabel::Other(s) => s,
        }
    }

    /// Accepts `D1`, `D-1`, or the full name (case-insensitive); anything
    /// else becomes `Other`.
    pub fn parse(s: &str) -> DiseaseLabel {
        let trimmed = s.trim();
        let compact: String = trimmed
            .chars()
            .filter(|c| !c.is_whitespace() && *c != '-')
            .collect::<String>()
            .to_ascii_uppercase();
        for known in DiseaseLabel::KNOWN {
            if compact == known.code() || trimmed.eq_ignore_ascii_case(known.name()) {
                return known;
            }
        }
        DiseaseLabel::Other(trimmed.to_string())
    }
}

impl fmt::Display for DiseaseLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for DiseaseLabel {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.code())
    }
}

impl<'de> Deserialize<'de> for DiseaseLabel {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Ok(DiseaseLabel::parse(&s))
    }
}

/// A canonical surgical route: lower-cased with whitespace collapsed.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RouteLabel(String);

impl RouteLabel {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Wraps an already-canonical string. Callers outside this module go
    /// through [`canonicalize_route`].
    #[cfg(test)]
    pub(crate) fn from_canonical(s: String) -> Self {
        RouteLabel(s)
    }
}

impl fmt::Display for RouteLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Lower-case, trim, and collapse internal whitespace.
pub fn normalize_text(raw: &str) -> String {
    raw.split_whitespace()
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Alias → canonical mapping. Keys and values are stored normalized.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AliasTable {
    entries: BTreeMap<String, String>,
}

impl AliasTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, alias: &str, canonical: &str) {
        let alias = normalize_text(alias);
        let canonical = normalize_text(canonical);
        if !alias.is_empty() && !canonical.is_empty() {
            self.entries.insert(alias, canonical);
        }
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        let mut t = AliasTable::new();
        for (a, c) in pairs {
            t.insert(a, c);
        }
        t
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(a, c)| (a.as_str(), c.as_str()))
    }

    pub fn canonical_values(&self) -> BTreeSet<&str> {
        self.entries.values().map(String::as_str).collect()
    }

    /// Resolves normalized text: a canonical value maps to itself, then an
    /// exact alias hit, then the longest alias contained on word
    /// boundaries (ties broken lexicographically).
    pub fn resolve(&self, normalized: &str) -> Option<&str> {
        if let Some(c) = self.entries.values().find(|c| c.as_str() == normalized) {
            return Some(c);
        }
        if let Some(c) = self.entries.get(normalized) {
            return Some(c);
        }
        let mut best: Option<(&str, &str)> = None;
        for (alias, canonical) in &self.entries {
            if !contains_on_word_boundary(normalized, alias) {
                continue;
            }
            best = match best {
                None => Some((alias, canonical)),
                Some((b, _)) if alias.len() > b.len() => Some((alias, canonical)),
                // BTreeMap iteration is lexicographic, so an equal-length
                // alias seen earlier already wins.
                keep => keep,
            };
        }
        best.map(|(_, c)| c)
    }
}

pub(crate) fn contains_on_word_boundary(haystack: &str, needle: &str) -> bool {
    if needle.is_empty() {
        return false;
    }
    let is_word = |c: char| c.is_alphanumeric() || c == '_';
    let mut from = 0;
    while let Some(pos) = haystack[from..].find(needle) {
        let start = from + pos;
        let end = start + needle.len();
        let before_ok = haystack[..start].chars().next_back().is_none_or(|c| !is_word(c));
        let after_ok = haystack[end..].chars().next().is_none_or(|c| !is_word(c));
        if before_ok && after_ok {
            return true;
        }
        from = start + haystack[start..].chars().next().map_or(1, char::len_utf8);
    }
    false
}

pub fn canonicalize_route(raw: &str, aliases: &AliasTable) -> Result<RouteLabel, DomainError> {
    let normalized = normalize_text(raw);
    if normalized.is_empty() {
        return Err(DomainError::EmptyRoute);
    }
    let canonical = aliases
        .resolve(&normalized)
        .map(str::to_string)
        .unwrap_or(normalized);
    Ok(RouteLabel(canonical))
}

fn default_true() -> bool {
    true
}

fn is_true(b: &bool) -> bool {
    *b
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanStep {
    pub step_id: SubtaskId,
    pub description: String,
    pub phase: PhaseId,
    /// False when the step could not be mapped onto the taxonomy.
    #[serde(default = "default_true", skip_serializing_if = "is_true")]
    pub canonical: bool,
}

impl PlanStep {
    pub fn new(step_id: impl Into<String>, description: impl Into<String>, phase: PhaseId) -> Self {
        PlanStep {
            step_id: SubtaskId(step_id.into()),
            description: description.into(),
            phase,
            canonical: true,
        }
    }
}

/// Who produced a transcript line. System lines announce events and
/// delegation notes; every other line belongs to exactly one role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Speaker {
    Role(RoleId),
    System,
}

impl Speaker {
    pub fn role(self) -> Option<RoleId> {
        match self {
            Speaker::Role(r) => Some(r),
            Speaker::System => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Speaker::Role(r) => r.as_str(),
            Speaker::System => "system",
        }
    }
}

impl fmt::Display for Speaker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for Speaker {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Speaker {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        if s == "system" {
            return Ok(Speaker::System);
        }
        s.parse::<RoleId>()
            .map(Speaker::Role)
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    #[default]
    Agent,
    Human,
    System,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Action {
    CompleteSubtask(SubtaskId),
    SelectRoute(RouteLabel),
    ProposePlan(Vec<PlanStep>),
    RaiseAlert(String),
    Administer(String),
    Monitor(String),
    NoOp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    CompleteSubtask,
    SelectRoute,
    ProposePlan,
    RaiseAlert,
    Administer,
    Monitor,
    NoOp,
}

impl ActionKind {
    pub fn directive_key(self) -> &'static str {
        match self {
            ActionKind::CompleteSubtask => "complete_subtask",
            ActionKind::SelectRoute => "select_route",
            ActionKind::ProposePlan => "propose_plan",
            ActionKind::RaiseAlert => "raise_alert",
            ActionKind::Administer => "administer",
            ActionKind::Monitor => "monitor",
            ActionKind::NoOp => "noop",
        }
    }

    pub fn from_directive_key(key: &str) -> Option<ActionKind> {
        [
            ActionKind::CompleteSubtask,
            ActionKind::SelectRoute,
            ActionKind::ProposePlan,
            ActionKind::RaiseAlert,
            ActionKind::Administer,
            ActionKind::Monitor,
            ActionKind::NoOp,
        ]
        .into_iter()
        .find(|k| k.directive_key() == key)
    }
}

impl Action {
    pub fn kind(&self) -> ActionKind {
        match self {
            Action::CompleteSubtask(_) => ActionKind::CompleteSubtask,
            Action::SelectRoute(_) => ActionKind::SelectRoute,
            Action::ProposePlan(_) => ActionKind::ProposePlan,
            Action::RaiseAlert(_) => ActionKind::RaiseAlert,
            Action::Administer(_) => ActionKind::Administer,
            Action::Monitor(_) => ActionKind::Monitor,
            Action::NoOp => ActionKind::NoOp,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub seq: u64,
    pub tick: u64,
    pub phase: PhaseId,
    pub speaker: Speaker,
    pub text: String,
    #[serde(default)]
    pub action: Option<Action>,
    #[serde(default)]
    pub origin: Origin,
}

/// A condition over recent dialogue that fires a one-off event.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventTrigger {
    pub event_id: String,
    /// Phase the trigger is armed in; `None` arms it everywhere.
    #[serde(default)]
    pub phase: Option<PhaseId>,
    /// Case-insensitive regular expression over the recent utterances.
    pub pattern: String,
    pub payload: String,
    #[serde(default)]
    pub priority: i32,
    /// Contingency subtasks the team has to handle once the event surfaces.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub adds_subtasks: Vec<SubtaskId>,
}

impl EventTrigger {
    pub fn firing(&self) -> EventFiring {
        EventFiring {
            event_id: self.event_id.clone(),
            payload: self.payload.clone(),
            priority: self.priority,
            adds_subtasks: self.adds_subtasks.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventFiring {
    pub event_id: String,
    pub payload: String,
    #[serde(default)]
    pub priority: i32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub adds_subtasks: Vec<SubtaskId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurgicalCase {
    pub case_id: String,
    #[serde(rename = "basic_information", default)]
    pub demographics: BTreeMap<String, String>,
    #[serde(rename = "patient_history", default)]
    pub history: String,
    #[serde(default)]
    pub mri_report: Option<MriReport>,
    #[serde(rename = "disease")]
    pub disease_label: DiseaseLabel,
    pub gold_route: RouteLabel,
    #[serde(default)]
    pub gold_plan: Vec<PlanStep>,
    #[serde(default)]
    pub gold_subtasks: BTreeMap<PhaseId, Vec<SubtaskId>>,
    /// Fields this version does not understand, kept for round-trips.
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl SurgicalCase {
    /// Compact clinical summary used in prompts and experience retrieval.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("Case {}\n", self.case_id));
        for (k, v) in &self.demographics {
            out.push_str(&format!("{k}: {v}\n"));
        }
        out.push_str(&format!("Diagnosis: {}\n", self.disease_label.name()));
        if !self.history.is_empty() {
            out.push_str(&format!("History: {}\n", self.history));
        }
        if let Some(mri) = &self.mri_report {
            out.push_str(&format!("MRI findings: {}\n", mri.findings));
            out.push_str(&format!("MRI impression: {}\n", mri.impression));
            for (k, v) in &mri.lesion_attributes {
                out.push_str(&format!("Lesion {k}: {v}\n"));
            }
        }
        out
    }

    /// Gold subtasks flattened in phase order.
    pub fn flattened_gold(&self) -> Vec<(PhaseId, SubtaskId)> {
        PhaseId::ALL
            .iter()
            .flat_map(|p| {
                self.gold_subtasks
                    .get(p)
                    .into_iter()
                    .flatten()
                    .map(move |s| (*p, s.clone()))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

impl Violation {
    fn new(field: impl Into<String>, rule: impl Into<String>) -> Self {
        Violation {
            field: field.into(),
            rule: rule.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

pub const RULE_NON_EMPTY: &str = "non-empty";
pub const RULE_REQUIRED: &str = "required";
pub const RULE_UNIQUE_STEP: &str = "step_id unique within plan";
pub const RULE_UNKNOWN_STEP: &str = "step_id in taxonomy";
pub const RULE_STEP_PHASE: &str = "phase consistent with taxonomy";
pub const RULE_SUBTASK_PHASE: &str = "belongs to phase taxonomy";

/// Checks a case against its invariants. An empty list means the case is
/// well formed.
pub fn validate_case(case: &SurgicalCase, taxonomy: &Taxonomy) -> Vec<Violation> {
    let mut out = Vec::new();
    if case.case_id.trim().is_empty() {
        out.push(Violation::new("case_id", RULE_NON_EMPTY));
    }
    if let DiseaseLabel::Other(s) = &case.disease_label {
        if s.trim().is_empty() {
            out.push(Violation::new("disease_label", RULE_NON_EMPTY));
        }
    }
    match &case.mri_report {
        None => out.push(Violation::new("mri_report", RULE_REQUIRED)),
        Some(mri) if mri.findings.trim().is_empty() => {
            out.push(Violation::new("mri_report.findings", RULE_NON_EMPTY))
        }
        Some(_) => {}
    }
    if case.gold_route.as_str().trim().is_empty() {
        out.push(Violation::new("gold_route", RULE_NON_EMPTY));
    }
    if case.gold_plan.is_empty() {
        out.push(Violation::new("gold_plan", RULE_NON_EMPTY));
    }
    let mut seen = BTreeSet::new();
    for (i, step) in case.gold_plan.iter().enumerate() {
        let field = format!("gold_plan[{i}]");
        if !seen.insert(&step.step_id) {
            out.push(Violation::new(field.clone(), RULE_UNIQUE_STEP));
        }
        if step.canonical {
            match taxonomy.phase_of(&step.step_id) {
                None => out.push(Violation::new(field, RULE_UNKNOWN_STEP)),
                Some(p) if p != step.phase => out.push(Violation::new(field, RULE_STEP_PHASE)),
                Some(_) => {}
            }
        }
    }
    for (phase, ids) in &case.gold_subtasks {
        for (i, id) in ids.iter().enumerate() {
            if taxonomy.phase_of(id) != Some(*phase) {
                out.push(Violation::new(
                    format!("gold_subtasks.{phase}[{i}]"),
                    RULE_SUBTASK_PHASE,
                ));
            }
        }
    }
    out
}
