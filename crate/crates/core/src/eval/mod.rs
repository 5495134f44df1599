//! Scoring of simulated reports against gold labels and aggregation into
//! table-shaped reports.

pub mod tables;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::{
    contains_on_word_boundary, DiseaseLabel, PhaseId, PlanStep, RouteLabel, SubtaskId, SurgicalCase,
};
use crate::workflow::SimulatedReport;

pub const REPORT_FORMAT_VERSION: &str = "1.0";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("gold plan is empty")]
    EmptyGold,
    #[error("no cases to aggregate")]
    NoCases,
    #[error("invalid eval config: {0}")]
    InvalidConfig(String),
}

impl EvalError {
    pub fn code(&self) -> &'static str {
        match self {
            EvalError::EmptyGold => "EmptyGold",
            EvalError::NoCases => "NoCases",
            EvalError::InvalidConfig(_) => "InvalidConfig",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    MultiSituationOverload,
    MisjudgedInitialApproach,
    RareDiseaseHallucination,
    Other,
}

impl FailureKind {
    pub const ALL: [FailureKind; 4] = [
        FailureKind::MultiSituationOverload,
        FailureKind::MisjudgedInitialApproach,
        FailureKind::RareDiseaseHallucination,
        FailureKind::Other,
    ];

    pub fn label(self) -> &'static str {
        match self {
            FailureKind::MultiSituationOverload => "Unable to cope with multiple intraoperative situations",
            FailureKind::MisjudgedInitialApproach => "Misjudgment of the initial surgical approach",
            FailureKind::RareDiseaseHallucination => "Hallucinations about rare diseases",
            FailureKind::Other => "Other",
        }
    }
}

impl fmt::Display for FailureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Switches for ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AblationFlags {
    pub copilot_on: bool,
    pub rag_on: bool,
    pub long_memory_on: bool,
    pub react_on: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            copilot_on: true,
            rag_on: true,
            long_memory_on: true,
            react_on: false,
        }
    }
}

impl AblationFlags {
    /// Named presets used by the CLI: `full`, `rag_off`, `copilot_off`,
    /// `memory_off`, `react_on`.
    pub fn preset(name: &str) -> Option<AblationFlags> {
        let full = AblationFlags::default();
        Some(match name {
            "full" => full,
            "rag_off" => AblationFlags { rag_on: false, ..full },
            "copilot_off" => AblationFlags { copilot_on: false, ..full },
            "memory_off" => AblationFlags { long_memory_on: false, ..full },
            "react_on" => AblationFlags { react_on: true, ..full },
            _ => return None,
        })
    }
}

/// Everything that identifies how a run was configured.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RunFingerprint {
    pub flags: AblationFlags,
    pub seed: u64,
    pub backend_id: String,
}

impl RunFingerprint {
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("fingerprint serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub checkpoints: Vec<f64>,
    /// Completeness threshold (percent) of the overload rule.
    pub overload_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            checkpoints: vec![0.25, 0.5, 0.75, 1.0],
            overload_threshold: 75.0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.checkpoints.is_empty() {
            return Err(EvalError::InvalidConfig("no checkpoints".into()));
        }
        if self.checkpoints.iter().any(|c| !(*c > 0.0 && *c <= 1.0)) {
            return Err(EvalError::InvalidConfig("checkpoints must lie in (0, 1]".into()));
        }
        if self.checkpoints.windows(2).any(|w| w[0] >= w[1]) {
            return Err(EvalError::InvalidConfig("checkpoints must be strictly increasing".into()));
        }
        if !(0.0..=100.0).contains(&self.overload_threshold) {
            return Err(EvalError::InvalidConfig("threshold must be a percentage".into()));
        }
        Ok(())
    }
}

pub fn score_route(predicted: Option<&RouteLabel>, gold: &RouteLabel) -> u8 {
    u8::from(predicted == Some(gold))
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Order-aware recall of the gold step ids.
pub fn score_plan(predicted: &[PlanStep], gold: &[PlanStep]) -> Result<f64, EvalError> {
    if gold.is_empty() {
        return Err(EvalError::EmptyGold);
    }
    let p: Vec<&SubtaskId> = predicted.iter().map(|s| &s.step_id).collect();
    let g: Vec<&SubtaskId> = gold.iter().map(|s| &s.step_id).collect();
    Ok(lcs_len(&p, &g) as f64 / g.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CheckpointScore {
    pub fraction: f64,
    /// Percent.
    pub completeness: f64,
    /// Percent.
    pub accuracy: f64,
}

/// Completeness and accuracy at each checkpoint. Checkpoint `c` covers
/// the first ⌈c·|G|⌉ gold subtasks; accuracy looks at the same number of
/// executed actions (or all of them, if fewer), scoring those whose
/// (subtask, phase) pair is in the gold set.
pub fn score_stage_checkpoints(
    executed: &[(PhaseId, SubtaskId)],
    case: &SurgicalCase,
    cfg: &EvalConfig,
) -> Vec<CheckpointScore> {
    let gold = case.flattened_gold();
    let gold_set: BTreeSet<&(PhaseId, SubtaskId)> = gold.iter().collect();
    let executed_set: BTreeSet<&(PhaseId, SubtaskId)> = executed.iter().collect();
    cfg.checkpoints
        .iter()
        .map(|&c| {
            let n = window_len(c, gold.len());
            let completeness = if n == 0 {
                0.0
            } else {
                let hit = gold[..n].iter().filter(|g| executed_set.contains(g)).count();
                100.0 * hit as f64 / n as f64
            };
            let m = n.min(executed.len());
            let accuracy = if m == 0 {
                0.0
            } else {
                let ok = executed[..m].iter().filter(|e| gold_set.contains(e)).count();
                100.0 * ok as f64 / m as f64
            };
            CheckpointScore {
                fraction: c,
                completeness,
                accuracy,
            }
        })
        .collect()
}

fn window_len(c: f64, total: usize) -> usize {
    // Guard against 0.75 * 8 landing a hair above 6.
    let raw = c * total as f64;
    let n = (raw - 1e-9).ceil().max(0.0) as usize;
    n.min(total)
}

/// Disease names a transcript may mention: the corpus labels plus rarer
/// sellar lesions a model might confuse them with.
pub const RARE_DISEASE_TERMS: [&str; 6] = [
    "craniopharyngioma",
    "rathke cleft cyst",
    "chordoma",
    "meningioma",
    "germinoma",
    "lymphocytic hypophysitis",
];

/// Disease names asserted anywhere in agent or human utterances, other
/// than the case's own label.
pub fn foreign_disease_mentions(report: &SimulatedReport, case: &SurgicalCase) -> Vec<String> {
    let own = case.disease_label.name().to_lowercase();
    let mut names: Vec<String> = DiseaseLabel::KNOWN.iter().map(|d| d.name().to_lowercase()).collect();
    names.extend(RARE_DISEASE_TERMS.iter().map(|s| s.to_string()));
    names.retain(|n| *n != own);
    let mut found = BTreeSet::new();
    for u in &report.transcript {
        if u.speaker.role().is_none() {
            continue;
        }
        let text = u.text.to_lowercase();
        for n in &names {
            if contains_on_word_boundary(&text, n) {
                found.insert(n.clone());
            }
        }
    }
    found.into_iter().collect()
}

/// First matching rule wins: wrong route, overload, hallucination, then
/// `Other` for a weak plan.
pub fn classify_failure(report: &SimulatedReport, case: &SurgicalCase, cfg: &EvalConfig) -> Option<FailureKind> {
    if score_route(report.chosen_route.as_ref(), &case.gold_route) == 0 {
        return Some(FailureKind::MisjudgedInitialApproach);
    }
    let mut per_phase: BTreeMap<PhaseId, usize> = BTreeMap::new();
    for e in &report.fired_events {
        *per_phase.entry(e.phase).or_default() += 1;
    }
    if per_phase.values().any(|n| *n >= 2) {
        let full = EvalConfig {
            checkpoints: vec![1.0],
            ..cfg.clone()
        };
        let completeness = score_stage_checkpoints(&report.executed_pairs(), case, &full)[0].completeness;
        if completeness < cfg.overload_threshold {
            return Some(FailureKind::MultiSituationOverload);
        }
    }
    if !foreign_disease_mentions(report, case).is_empty() {
        return Some(FailureKind::RareDiseaseHallucination);
    }
    match score_plan(&report.executed_plan, &case.gold_plan) {
        Ok(p) if p < 0.5 => Some(FailureKind::Other),
        Ok(_) => None,
        Err(_) => Some(FailureKind::Other),
    }
}

/// Scores of one case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub case_id: String,
    pub disease: DiseaseLabel,
    pub sim_id: String,
    pub route_score: u8,
    pub plan_score: f64,
    pub checkpoints: Vec<CheckpointScore>,
    pub failure: Option<FailureKind>,
    #[serde(default)]
    pub aborted: bool,
    /// Set when the run failed before producing a report.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn evaluate_case(report: &SimulatedReport, case: &SurgicalCase, cfg: &EvalConfig) -> Result<CaseResult, EvalError> {
    Ok(CaseResult {
        case_id: case.case_id.clone(),
        disease: case.disease_label.clone(),
        sim_id: report.sim_id.clone(),
        route_score: score_route(report.chosen_route.as_ref(), &case.gold_route),
        plan_score: score_plan(&report.executed_plan, &case.gold_plan)?,
        checkpoints: score_stage_checkpoints(&report.executed_pairs(), case, cfg),
        failure: classify_failure(report, case, cfg),
        aborted: report.aborted,
        error: None,
    })
}

/// A case whose run errored: scored zero everywhere.
pub fn errored_case(case: &SurgicalCase, cfg: &EvalConfig, error: String) -> CaseResult {
    CaseResult {
        case_id: case.case_id.clone(),
        disease: case.disease_label.clone(),
        sim_id: String::new(),
        route_score: 0,
        plan_score: 0.0,
        checkpoints: cfg
            .checkpoints
            .iter()
            .map(|&c| CheckpointScore {
                fraction: c,
                completeness: 0.0,
                accuracy: 0.0,
            })
            .collect(),
        failure: None,
        aborted: false,
        error: Some(error),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiseaseScore {
    pub n_cases: usize,
    pub route_accuracy: f64,
    pub plan_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format_version: String,
    pub n_cases: usize,
    pub route_accuracy: f64,
    pub plan_accuracy: f64,
    pub checkpoints: Vec<CheckpointScore>,
    /// Keyed by disease code.
    pub per_disease: BTreeMap<String, DiseaseScore>,
    pub failure_counts: BTreeMap<FailureKind, usize>,
    pub errored_cases: usize,
    pub flags: AblationFlags,
    pub backend_id: String,
    pub fingerprint: String,
    /// Sorted, so reports over the same corpus compare row to row.
    pub case_ids: Vec<String>,
}

/// Rounds a percentage to two decimals.
pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Aggregates case results. Results are sorted by case id first, so the
/// output does not depend on input order.
pub fn aggregate_report(
    results: &[CaseResult],
    flags: AblationFlags,
    backend_id: &str,
    base_seed: u64,
) -> Result<EvalReport, EvalError> {
    if results.is_empty() {
        return Err(EvalError::NoCases);
    }
    let mut sorted: Vec<&CaseResult> = results.iter().collect();
    sorted.sort_by(|a, b| a.case_id.cmp(&b.case_id).then(a.sim_id.cmp(&b.sim_id)));

    let route = round2(100.0 * mean(sorted.iter().map(|r| f64::from(r.route_score))));
    let plan = round2(100.0 * mean(sorted.iter().map(|r| r.plan_score)));
    let n_cp = sorted[0].checkpoints.len();
    let checkpoints = (0..n_cp)
        .map(|i| CheckpointScore {
            fraction: sorted[0].checkpoints[i].fraction,
            completeness: round2(mean(sorted.iter().map(|r| r.checkpoints.get(i).map_or(0.0, |c| c.completeness)))),
            accuracy: round2(mean(sorted.iter().map(|r| r.checkpoints.get(i).map_or(0.0, |c| c.accuracy)))),
        })
        .collect();

    let mut groups: BTreeMap<String, Vec<&CaseResult>> = BTreeMap::new();
    for r in &sorted {
        groups.entry(r.disease.code().to_string()).or_default().push(r);
    }
    let per_disease = groups
        .into_iter()
        .map(|(k, rs)| {
            (
                k,
                DiseaseScore {
                    n_cases: rs.len(),
                    route_accuracy: round2(100.0 * mean(rs.iter().map(|r| f64::from(r.route_score)))),
                    plan_accuracy: round2(100.0 * mean(rs.iter().map(|r| r.plan_score))),
                },
            )
        })
        .collect();

    let mut failure_counts: BTreeMap<FailureKind, usize> = FailureKind::ALL.iter().map(|k| (*k, 0)).collect();
    for r in &sorted {
        if let Some(f) = r.failure {
            *failure_counts.entry(f).or_default() += 1;
        }
    }
    let fingerprint = RunFingerprint {
        flags,
        seed: base_seed,
        backend_id: backend_id.to_string(),
    }
    .digest();
    Ok(EvalReport {
        format_version: REPORT_FORMAT_VERSION.to_string(),
        n_cases: sorted.len(),
        route_accuracy: route,
        plan_accuracy: plan,
        checkpoints,
        per_disease,
        failure_counts,
        errored_cases: sorted.iter().filter(|r| r.error.is_some()).count(),
        flags,
        backend_id: backend_id.to_string(),
        fingerprint,
        case_ids: sorted.iter().map(|r| r.case_id.clone()).collect(),
    })
}
