//! WebAssembly bindings for the single-page demo in `www/`.
//!
//! Three operations, all on the bundled fixtures with the scripted
//! backend: play a whole episode, score a plan against the reference
//! case, and query a knowledge bank. Each returns a JSON string. The
//! plain functions carry the logic so native tests can call them; the
//! `#[wasm_bindgen]` wrappers only convert errors.

use std::sync::OnceLock;

use orsim_core::domain::{PhaseId, PlanStep, Speaker, SubtaskId, SurgicalCase};
use orsim_core::eval::{evaluate_case, lcs_len, score_plan, AblationFlags, CaseResult, EvalConfig};
use orsim_core::fixtures;
use orsim_core::knowledge::KnowledgeLibrary;
use orsim_core::runner::RunSpec;
use orsim_core::synth::{generate_synthetic_cases, uniform_mix};
use orsim_core::workflow::SimConfig;
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Synthetic cases offered next to the reference case.
pub const SYNTHETIC_CASES: usize = 10;
pub const MAX_K: usize = 20;

fn library() -> &'static KnowledgeLibrary {
    static LIB: OnceLock<KnowledgeLibrary> = OnceLock::new();
    LIB.get_or_init(fixtures::library)
}

/// The reference case followed by the demo's synthetic cases.
pub fn demo_cases() -> Vec<SurgicalCase> {
    let mut cases = vec![fixtures::case01()];
    cases.extend(
        generate_synthetic_cases(SYNTHETIC_CASES, 0, &uniform_mix(), &fixtures::vocabulary())
            .expect("demo corpus generates"),
    );
    cases
}

#[derive(Debug, Serialize)]
pub struct Line {
    pub seq: u64,
    pub phase: &'static str,
    pub speaker: String,
    pub text: String,
}

#[derive(Debug, Serialize)]
pub struct Episode {
    pub case_id: String,
    pub disease: String,
    pub seed: u64,
    pub preset: String,
    pub aborted: bool,
    pub chosen_route: Option<String>,
    pub gold_route: String,
    pub events: Vec<String>,
    pub transcript: Vec<Line>,
    pub scores: CaseResult,
    pub fingerprint_digest: String,
}

pub fn run_episode_impl(case_index: usize, seed: u64, preset: &str) -> Result<Episode, String> {
    let flags = AblationFlags::preset(preset).ok_or_else(|| format!("unknown preset `{preset}`"))?;
    let cases = demo_cases();
    let case = cases
        .get(case_index)
        .ok_or_else(|| format!("case index {case_index} out of range 0..{}", cases.len()))?;
    let spec = RunSpec::fixture(SimConfig::with_flags(flags));
    let out = spec
        .simulate(case, seed, None, None)
        .map_err(|e| format!("{}: {e}", e.code()))?;
    let scores = evaluate_case(&out.report, case, &EvalConfig::default()).map_err(|e| e.to_string())?;
    let report = out.report;
    Ok(Episode {
        case_id: case.case_id.clone(),
        disease: case.disease_label.to_string(),
        seed,
        preset: preset.to_string(),
        aborted: report.aborted,
        chosen_route: report.chosen_route.as_ref().map(|r| r.to_string()),
        gold_route: case.gold_route.to_string(),
        events: report.fired_events.iter().map(|e| e.event_id.clone()).collect(),
        transcript: report
            .transcript
            .iter()
            .map(|u| Line {
                seq: u.seq,
                phase: u.phase.display_name(),
                speaker: match u.speaker {
                    Speaker::Role(r) => r.display_name().to_string(),
                    Speaker::System => "System".to_string(),
                },
                text: u.text.clone(),
            })
            .collect(),
        scores,
        fingerprint_digest: report.fingerprint_digest,
    })
}

#[derive(Debug, Serialize)]
pub struct PlanScore {
    /// Percent of the gold plan recovered in order.
    pub score: f64,
    pub lcs: usize,
    pub gold: Vec<String>,
    /// Entered ids that are not in the task taxonomy.
    pub unknown: Vec<String>,
}

/// Scores step ids (separated by commas or newlines) against the
/// reference case's gold plan.
pub fn score_plan_impl(predicted: &str) -> Result<PlanScore, String> {
    let case = fixtures::case01();
    let vocab = fixtures::vocabulary();
    let known = |id: &str| {
        PhaseId::ALL
            .iter()
            .any(|p| vocab.taxonomy.tasks(*p).iter().any(|t| t.id.as_str() == id))
    };
    let ids: Vec<&str> = predicted
        .split([',', '\n'])
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    let steps: Vec<PlanStep> = ids
        .iter()
        .map(|id| PlanStep::new(*id, *id, PhaseId::SurgicalOperation))
        .collect();
    let score = score_plan(&steps, &case.gold_plan).map_err(|e| e.to_string())?;
    let pred_ids: Vec<&SubtaskId> = steps.iter().map(|s| &s.step_id).collect();
    let gold_ids: Vec<&SubtaskId> = case.gold_plan.iter().map(|s| &s.step_id).collect();
    Ok(PlanScore {
        score: score * 100.0,
        lcs: lcs_len(&pred_ids, &gold_ids),
        gold: case.gold_plan.iter().map(|s| s.step_id.to_string()).collect(),
        unknown: ids.iter().filter(|id| !known(id)).map(|s| s.to_string()).collect(),
    })
}

#[derive(Debug, Serialize)]
pub struct Hit {
    pub chunk_id: String,
    pub source_doc: String,
    pub score: f64,
    pub text: String,
}

pub fn bank_ids() -> Vec<String> {
    library().bank_ids().map(str::to_string).collect()
}

pub fn retrieve_impl(bank_id: &str, query: &str, k: usize) -> Result<Vec<Hit>, String> {
    if !(1..=MAX_K).contains(&k) {
        return Err(format!("k must be between 1 and {MAX_K}"));
    }
    let lib = library();
    let bank = lib.get(bank_id).ok_or_else(|| format!("unknown bank `{bank_id}`"))?;
    let hits = bank.retrieve_top_k(query, k, lib.embedder()).map_err(|e| e.to_string())?;
    Ok(hits
        .into_iter()
        .map(|h| Hit {
            chunk_id: h.chunk.chunk_id,
            source_doc: h.chunk.source_doc,
            score: h.score,
            text: h.chunk.text,
        })
        .collect())
}

fn to_json<T: Serialize>(r: Result<T, String>) -> Result<String, JsError> {
    r.map(|v| serde_json::to_string(&v).expect("demo output serializes"))
        .map_err(|e| JsError::new(&e))
}

/// Case ids offered by the demo, in index order, as a JSON array.
#[wasm_bindgen(js_name = caseIds)]
pub fn case_ids() -> String {
    let ids: Vec<String> = demo_cases().into_iter().map(|c| c.case_id).collect();
    serde_json::to_string(&ids).expect("ids serialize")
}

/// Knowledge bank ids as a JSON array.
#[wasm_bindgen(js_name = bankIds)]
pub fn bank_ids_json() -> String {
    serde_json::to_string(&bank_ids()).expect("ids serialize")
}

#[wasm_bindgen(js_name = runEpisode)]
pub fn run_episode(case_index: usize, seed: u64, preset: &str) -> Result<String, JsError> {
    to_json(run_episode_impl(case_index, seed, preset))
}

#[wasm_bindgen(js_name = scorePlan)]
pub fn score_plan_js(predicted: &str) -> Result<String, JsError> {
    to_json(score_plan_impl(predicted))
}

#[wasm_bindgen]
pub fn retrieve(bank_id: &str, query: &str, k: usize) -> Result<String, JsError> {
    to_json(retrieve_impl(bank_id, query, k))
}
