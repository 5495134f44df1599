//! Property checks for the domain vocabulary: route canonicalization and
//! case validation against an independent invariant checker.

use std::collections::{BTreeMap, BTreeSet};

use orsim_core::domain::{
    canonicalize_route, normalize_text, validate_case, AliasTable, DiseaseLabel, PhaseId, PlanStep, StageId,
    SubtaskId, SurgicalCase,
};
use orsim_core::fixtures;
use proptest::prelude::*;

fn route_aliases() -> AliasTable {
    fixtures::vocabulary().route_aliases
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn canonicalize_is_idempotent_and_case_insensitive(raw in "[A-Za-z ]{0,12}( (eet|craniotomy|Endoscopic Endonasal|mts))?[a-z ]{0,6}") {
        let aliases = route_aliases();
        match canonicalize_route(&raw, &aliases) {
            Ok(once) => {
                let twice = canonicalize_route(once.as_str(), &aliases).unwrap();
                prop_assert_eq!(&once, &twice);
                let upper = canonicalize_route(&raw.to_uppercase(), &aliases).unwrap();
                prop_assert_eq!(once, upper);
            }
            Err(e) => prop_assert!(raw.trim().is_empty(), "{e}"),
        }
    }
}

#[test]
fn phase_order_is_total_and_stage_is_fixed() {
    let phases = PhaseId::ALL;
    for w in phases.windows(2) {
        assert!(w[0] < w[1]);
        assert_eq!(w[0].next(), Some(w[1]));
    }
    let stages: Vec<StageId> = phases.iter().map(|p| p.stage()).collect();
    assert_eq!(
        stages,
        [
            StageId::Preoperative,
            StageId::Preoperative,
            StageId::Preoperative,
            StageId::Intraoperative,
            StageId::Postoperative
        ]
    );
}

/// Case mutations the fuzzer composes.
#[derive(Debug, Clone)]
enum Mutation {
    BlankId,
    DropMri,
    BlankFindings,
    ClearPlan,
    DuplicateStep(usize),
    UnknownStep(usize),
    WrongStepPhase(usize),
    MisplaceSubtask(usize, usize),
    BlankOtherDisease,
}

fn mutation() -> impl Strategy<Value = Mutation> {
    prop_oneof![
        Just(Mutation::BlankId),
        Just(Mutation::DropMri),
        Just(Mutation::BlankFindings),
        Just(Mutation::ClearPlan),
        (0usize..8).prop_map(Mutation::DuplicateStep),
        (0usize..8).prop_map(Mutation::UnknownStep),
        (0usize..8).prop_map(Mutation::WrongStepPhase),
        ((0usize..5), (0usize..8)).prop_map(|(p, i)| Mutation::MisplaceSubtask(p, i)),
        Just(Mutation::BlankOtherDisease),
    ]
}

fn apply(case: &mut SurgicalCase, m: &Mutation) {
    match m {
        Mutation::BlankId => case.case_id = "  ".into(),
        Mutation::DropMri => case.mri_report = None,
        Mutation::BlankFindings => {
            if let Some(mri) = case.mri_report.as_mut() {
                mri.findings.clear();
            }
        }
        Mutation::ClearPlan => case.gold_plan.clear(),
        Mutation::DuplicateStep(i) => {
            if !case.gold_plan.is_empty() {
                let s = case.gold_plan[i % case.gold_plan.len()].clone();
                case.gold_plan.push(s);
            }
        }
        Mutation::UnknownStep(i) => {
            case.gold_plan.push(PlanStep::new(format!("op.invented_{i}"), "Invented", PhaseId::SurgicalOperation));
        }
        Mutation::WrongStepPhase(i) => {
            if !case.gold_plan.is_empty() {
                let n = case.gold_plan.len();
                case.gold_plan[i % n].phase = PhaseId::PatientTransfer;
            }
        }
        Mutation::MisplaceSubtask(p, i) => {
            let from = PhaseId::ALL[*p];
            let to = PhaseId::ALL[(*p + 1) % 5];
            if let Some(ids) = case.gold_subtasks.get(&from) {
                if !ids.is_empty() {
                    let id = ids[i % ids.len()].clone();
                    case.gold_subtasks.entry(to).or_default().push(id);
                }
            }
        }
        Mutation::BlankOtherDisease => case.disease_label = DiseaseLabel::Other(" ".into()),
    }
}

/// Independent re-check of every case invariant, reading the taxonomy
/// straight from the bundled vocabulary JSON.
fn oracle(case: &SurgicalCase) -> BTreeSet<(String, String)> {
    let raw: serde_json::Value = serde_json::from_str(fixtures::VOCABULARY_JSON).unwrap();
    let mut phase_of: BTreeMap<String, String> = BTreeMap::new();
    for (phase, tasks) in raw["taxonomy"]["phases"].as_object().unwrap() {
        for t in tasks.as_array().unwrap() {
            phase_of.insert(t["id"].as_str().unwrap().to_string(), phase.clone());
        }
    }
    let mut out = BTreeSet::new();
    let mut add = |f: String, r: &str| {
        out.insert((f, r.to_string()));
    };
    if case.case_id.trim().is_empty() {
        add("case_id".into(), "non-empty");
    }
    if matches!(&case.disease_label, DiseaseLabel::Other(s) if s.trim().is_empty()) {
        add("disease_label".into(), "non-empty");
    }
    match &case.mri_report {
        None => add("mri_report".into(), "required"),
        Some(m) if m.findings.trim().is_empty() => add("mri_report.findings".into(), "non-empty"),
        _ => {}
    }
    if case.gold_plan.is_empty() {
        add("gold_plan".into(), "non-empty");
    }
    for (i, s) in case.gold_plan.iter().enumerate() {
        if case.gold_plan[..i].iter().any(|p| p.step_id == s.step_id) {
            add(format!("gold_plan[{i}]"), "step_id unique within plan");
        }
        match phase_of.get(s.step_id.as_str()) {
            None => add(format!("gold_plan[{i}]"), "step_id in taxonomy"),
            Some(p) if *p != s.phase.as_str() => add(format!("gold_plan[{i}]"), "phase consistent with taxonomy"),
            _ => {}
        }
    }
    for (phase, ids) in &case.gold_subtasks {
        for (i, id) in ids.iter().enumerate() {
            if phase_of.get(id.as_str()).map(String::as_str) != Some(phase.as_str()) {
                add(format!("gold_subtasks.{phase}[{i}]"), "belongs to phase taxonomy");
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn validate_case_matches_independent_checker(muts in prop::collection::vec(mutation(), 0..4)) {
        let vocab = fixtures::vocabulary();
        let mut case = fixtures::case01();
        for m in &muts {
            apply(&mut case, m);
        }
        let got: BTreeSet<(String, String)> = validate_case(&case, &vocab.taxonomy)
            .into_iter()
            .map(|v| (v.field, v.rule))
            .collect();
        prop_assert_eq!(got, oracle(&case));
    }
}

#[test]
fn well_formed_cases_have_no_violations() {
    let vocab = fixtures::vocabulary();
    assert!(validate_case(&fixtures::case01(), &vocab.taxonomy).is_empty());
    let synth = orsim_core::synth::generate_synthetic_cases(40, 3, &orsim_core::synth::uniform_mix(), &vocab).unwrap();
    for c in &synth {
        assert!(validate_case(c, &vocab.taxonomy).is_empty(), "{}", c.case_id);
    }
}

#[test]
fn empty_gold_plan_is_named() {
    let vocab = fixtures::vocabulary();
    let mut case = fixtures::case01();
    case.gold_plan.clear();
    let v = validate_case(&case, &vocab.taxonomy);
    assert_eq!(v.len(), 1);
    assert_eq!((v[0].field.as_str(), v[0].rule.as_str()), ("gold_plan", "non-empty"));
}

#[test]
fn normalization_collapses_whitespace_and_case() {
    assert_eq!(normalize_text("  Endoscopic\t ENDONASAL "), "endoscopic endonasal");
    let _ = SubtaskId::from("x");
}
