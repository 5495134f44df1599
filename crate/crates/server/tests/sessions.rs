//! Session endpoints: creation, streaming, training-mode controls, copilot
//! queries, evaluation runs and authentication.

mod common;

use std::collections::BTreeSet;
use std::time::Duration;

use common::{code, config, start};
use orsim_core::domain::{Action, Origin, PhaseId, Speaker, Utterance};
use orsim_core::eval::{evaluate_case, EvalConfig};
use orsim_core::fixtures;
use orsim_core::runner::run_eval;
use orsim_core::workflow::SimulatedReport;
use orsim_server::{EventKind, StreamEvent};
use serde_json::{json, Value};

const LONG: Duration = Duration::from_secs(60);

fn training(case_id: &str) -> Value {
    json!({"case_id": case_id, "mode": "training", "seed": 3, "human_timeout_ms": 600_000})
}

fn utterances(events: &[StreamEvent]) -> Vec<Utterance> {
    events
        .iter()
        .filter_map(|e| match &e.kind {
            EventKind::Utterance { utterance } => Some(utterance.clone()),
            _ => None,
        })
        .collect()
}

fn report_of(view: &Value) -> SimulatedReport {
    serde_json::from_value(view["report"].clone()).unwrap()
}

#[test]
fn creation_returns_descriptors_and_named_errors() {
    let c = start(config());
    let (status, v) = c.post("/sessions", json!({"case_id": "case01", "pace_ms": 60_000}));
    assert_eq!(status, 201);
    assert_eq!(v["phase"], "patient_transfer");
    assert_eq!(v["status"], "running");
    assert_eq!(v["mode"], "autonomous");
    let a = v["session_id"].as_str().unwrap().to_string();
    let b = c.create(json!({"case_id": "case01", "pace_ms": 60_000}));
    assert_ne!(a, b);
    assert!(a.len() >= 32, "session ids carry a full uuid");

    let cases = [
        (json!({"case_id": "nope"}), 404, "UnknownCase"),
        (json!({}), 400, "InvalidConfig"),
        (json!({"case_id": "case01", "preset": "turbo"}), 400, "InvalidConfig"),
        (json!({"case_id": "case01", "pace_ms": 0}), 400, "InvalidConfig"),
        (json!({"case_id": "case01", "mode": "sideways"}), 400, "BadRequest"),
        (json!({"case_id": "case01", "colour": 1}), 400, "BadRequest"),
    ];
    for (body, want_status, want_code) in cases {
        let (status, v) = c.post("/sessions", body.clone());
        assert_eq!((status, code(&v)), (want_status, want_code), "{body}");
    }
    let (status, v) = c.post_raw("/sessions", "{ nope");
    assert_eq!((status, code(&v)), (400, "BadRequest"));

    let inline: Value = serde_json::from_str(fixtures::CASE01_JSON).unwrap();
    let (status, v) = c.post("/sessions", json!({"case": inline, "pace_ms": 60_000}));
    assert_eq!(status, 201, "{v}");
    let mut broken = inline.clone();
    broken["gold_plan"] = json!([]);
    let (status, v) = c.post("/sessions", json!({"case": broken}));
    assert_eq!((status, code(&v)), (400, "InvalidCase"));
    let (status, v) = c.post("/sessions", json!({"case": inline, "case_id": "case01"}));
    assert_eq!((status, code(&v)), (400, "InvalidConfig"));

    let (status, v) = c.get("/sessions/doesnotexist");
    assert_eq!((status, code(&v)), (404, "UnknownSession"));
    let (status, v) = c.get("/sessions");
    assert_eq!(status, 200);
    assert_eq!(v.as_array().unwrap().len(), 3);
}

#[test]
fn autonomous_stream_carries_the_whole_episode_in_order() {
    let c = start(config());
    let id = c.create(json!({"case_id": "case01", "seed": 7, "pace_ms": 2}));
    let first = c.events(&id, None, usize::MAX);
    let second = c.events(&id, Some(0), usize::MAX);
    assert_eq!(first, second, "two subscribers see identical sequences");

    let seqs: Vec<u64> = first.iter().map(|e| e.seq).collect();
    assert_eq!(seqs, (0..first.len() as u64).collect::<Vec<_>>(), "no gaps or duplicates");
    assert!(matches!(first.last().unwrap().kind, EventKind::Finalized { aborted: false, .. }));

    let view = c.get(&format!("/sessions/{id}")).1;
    assert_eq!(view["status"], "finalized");
    let report = report_of(&view);
    assert_eq!(utterances(&first), report.transcript, "stream utterances equal the finalized transcript");

    let changes: Vec<(PhaseId, PhaseId)> = first
        .iter()
        .filter_map(|e| match e.kind {
            EventKind::PhaseChanged { from, to, .. } => Some((from, to)),
            _ => None,
        })
        .collect();
    let want: Vec<(PhaseId, PhaseId)> = PhaseId::ALL.windows(2).map(|w| (w[0], w[1])).collect();
    assert_eq!(changes, want);
    assert!(first.iter().any(|e| matches!(e.kind, EventKind::Guidance { .. })));

    // Same case and seed as a direct library run.
    let direct = orsim_core::runner::RunSpec::fixture(Default::default())
        .simulate(&fixtures::case01(), 7, Some(report.sim_id.clone()), None)
        .unwrap();
    assert_eq!(direct.report.transcript, report.transcript);

    let debrief: orsim_core::eval::CaseResult = serde_json::from_value(view["debrief"].clone()).unwrap();
    assert_eq!(debrief, evaluate_case(&report, &fixtures::case01(), &EvalConfig::default()).unwrap());
}

#[test]
fn late_subscribers_get_backfill_then_end_of_stream() {
    let c = start(config());
    let id = c.create(json!({"case_id": "case01", "pace_ms": 1}));
    c.wait_for(&id, LONG, |v| v["status"] == "finalized");
    let all = c.events(&id, None, usize::MAX);
    let view = c.get(&format!("/sessions/{id}")).1;
    assert_eq!(all.len() as u64, view["event_count"].as_u64().unwrap());
    assert_eq!(utterances(&all), report_of(&view).transcript);
    let tail = c.events(&id, Some(10), usize::MAX);
    assert_eq!(tail, all[10..].to_vec());
    assert!(c.events(&id, Some(1_000_000), usize::MAX).is_empty());
}

#[test]
fn live_subscriber_sees_turns_as_they_happen() {
    let c = start(config());
    let id = c.create(training("case01"));
    let reader = {
        let c = c.clone();
        let id = id.clone();
        std::thread::spawn(move || c.events(&id, Some(0), 10))
    };
    std::thread::sleep(Duration::from_millis(100));
    let (status, v) = c.post(&format!("/sessions/{id}/tick"), json!({"turns": 10}));
    assert_eq!(status, 200, "{v}");
    assert_eq!(v["advanced"], 10);
    let events = reader.join().unwrap();
    assert_eq!(events.len(), 10);
    assert!(events.windows(2).all(|w| w[0].seq + 1 == w[1].seq));
}

#[test]
fn training_controls_are_checked() {
    let c = start(config());
    let auto = c.create(json!({"case_id": "case01", "pace_ms": 60_000}));
    for (path, body) in [
        ("takeover", json!({"role": "chief_surgeon"})),
        ("tick", json!({"turns": 1})),
        ("input", json!({"role": "ward_nurse", "text": "hi"})),
    ] {
        let (status, v) = c.post(&format!("/sessions/{auto}/{path}"), body);
        assert_eq!((status, code(&v)), (409, "NotTrainingMode"), "{path}");
    }

    let id = c.create(training("case01"));
    let (status, v) = c.post(&format!("/sessions/{id}/takeover"), json!({"role": "surgery_copilot"}));
    assert_eq!((status, code(&v)), (409, "RoleUnavailable"));
    let (status, v) = c.post(&format!("/sessions/{id}/takeover"), json!({"role": "janitor"}));
    assert_eq!((status, code(&v)), (409, "RoleUnavailable"));
    let (status, v) = c.post(&format!("/sessions/{id}/takeover"), json!({"role": "chief_surgeon"}));
    assert_eq!(status, 200);
    assert_eq!(v["human_roles"], json!(["chief_surgeon"]));
    let (status, v) = c.post(&format!("/sessions/{id}/input"), json!({"role": "ward_nurse", "text": "hi"}));
    assert_eq!((status, code(&v)), (409, "RoleUnavailable"), "not taken over");
    let (status, v) = c.post(&format!("/sessions/{id}/input"), json!({"role": "chief_surgeon", "text": "hi"}));
    assert_eq!((status, code(&v)), (409, "NotYourTurn"));
    let (status, v) = c.post(&format!("/sessions/{id}/tick"), json!({"turns": 0}));
    assert_eq!((status, code(&v)), (400, "InvalidConfig"));
    let (status, v) = c.post("/sessions/nope/tick", json!({}));
    assert_eq!((status, code(&v)), (404, "UnknownSession"));

    // Ticks stop at the human's turn and the turn waits there.
    let (_, v) = c.post(&format!("/sessions/{id}/tick"), json!({"turns": 500}));
    assert_eq!(v["awaiting_human"], "chief_surgeon", "{v}");
    assert_eq!(v["next_turn"], json!({"kind": "role", "role": "chief_surgeon"}));
    let before = c.get(&format!("/sessions/{id}")).1["transcript_len"].clone();
    let (_, v) = c.post(&format!("/sessions/{id}/tick"), json!({"turns": 5}));
    assert_eq!(v["advanced"], 0);
    assert_eq!(c.get(&format!("/sessions/{id}")).1["transcript_len"], before);

    let text = "Endoscopic approach.\n[[ACTION: select_route=endoscopic endonasal transsphenoidal]]";
    let (status, v) = c.post(&format!("/sessions/{id}/input"), json!({"role": "chief_surgeon", "text": text}));
    assert_eq!(status, 200, "{v}");
    let u: Utterance = serde_json::from_value(v).unwrap();
    assert_eq!(u.origin, Origin::Human);
    assert_eq!(u.speaker, Speaker::Role(orsim_core::domain::RoleId::ChiefSurgeon));
    assert!(matches!(u.action, Some(Action::SelectRoute(ref r)) if r.as_str() == "endoscopic endonasal transsphenoidal"));

    let (status, v) = c.post(&format!("/sessions/{id}/finalize"), json!({}));
    assert_eq!((status, code(&v)), (409, "NotReady"));
    let (status, v) = c.post(&format!("/sessions/{id}/finalize"), json!({"force": true}));
    assert_eq!(status, 200);
    assert_eq!(v["aborted"], true);
    let (status, v) = c.post(&format!("/sessions/{id}/finalize"), json!({"force": true}));
    assert_eq!((status, code(&v)), (409, "AlreadyFinalized"));
    let events = c.events(&id, None, usize::MAX);
    assert!(matches!(events.last().unwrap().kind, EventKind::Finalized { aborted: true, .. }));
    assert!(events.iter().any(|e| e.kind == EventKind::RoleTakenOver { role: orsim_core::domain::RoleId::ChiefSurgeon }));
}

#[test]
fn concurrent_submissions_for_one_turn_have_one_winner() {
    let c = start(config());
    let id = c.create(training("case01"));
    c.post(&format!("/sessions/{id}/takeover"), json!({"role": "ward_nurse"}));
    let v = c.get(&format!("/sessions/{id}")).1;
    assert_eq!(v["awaiting_human"]["role"], "ward_nurse", "the first turn is the ward nurse's");
    let handles: Vec<_> = (0..8)
        .map(|i| {
            let c = c.clone();
            let id = id.clone();
            std::thread::spawn(move || {
                let text = format!("Submission {i}.\n[[ACTION: complete_subtask=transfer.identity_check]]");
                c.post(&format!("/sessions/{id}/input"), json!({"role": "ward_nurse", "text": text}))
            })
        })
        .collect();
    let results: Vec<(u16, Value)> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    let winners = results.iter().filter(|r| r.0 == 200).count();
    assert_eq!(winners, 1, "{results:?}");
    assert!(results.iter().filter(|r| r.0 != 200).all(|r| code(&r.1) == "NotYourTurn"));
    assert_eq!(c.get(&format!("/sessions/{id}")).1["transcript_len"], 1);
}

#[test]
fn unanswered_human_turns_are_delegated() {
    let c = start(config());
    let id = c.create(json!({"case_id": "case01", "mode": "training", "human_timeout_ms": 150}));
    c.post(&format!("/sessions/{id}/takeover"), json!({"role": "ward_nurse"}));
    let v = c.wait_for(&id, LONG, |v| v["human_roles"] == json!([]));
    assert!(v["awaiting_human"].is_null());
    let events = c.events(&id, Some(0), 4);
    let kinds: Vec<&str> = events.iter().map(|e| e.kind.name()).collect();
    assert_eq!(kinds, ["role_taken_over", "human_turn", "utterance", "delegated"]);
    match &events[2].kind {
        EventKind::Utterance { utterance } => {
            assert_eq!(utterance.origin, Origin::System);
            assert!(utterance.text.contains("did not respond"), "{}", utterance.text);
        }
        other => panic!("{other:?}"),
    }
    // The agent took the delegated turn.
    let next = c.events(&id, Some(4), 1);
    assert!(matches!(&next[0].kind, EventKind::Utterance { utterance } if utterance.origin == Origin::Agent));
}

#[test]
fn copilot_queries_do_not_touch_the_transcript() {
    let c = start(config());
    let id = c.create(training("case01"));
    c.post(&format!("/sessions/{id}/tick"), json!({"turns": 30}));
    let before = c.get(&format!("/sessions/{id}")).1;
    for i in 0..20 {
        let q = if i % 2 == 0 { "what stage are we in?" } else { "what is the plan?" };
        let (status, a) = c.post(&format!("/sessions/{id}/copilot/query"), json!({"question": q}));
        assert_eq!(status, 200, "{a}");
        assert_eq!(a["post_op"], false);
        if i == 0 {
            let phase: PhaseId = serde_json::from_value(before["phase"].clone()).unwrap();
            let answer = a["answer"].as_str().unwrap().to_lowercase();
            assert!(answer.contains(&phase.display_name().to_lowercase()), "{answer}");
        }
    }
    let after = c.get(&format!("/sessions/{id}")).1;
    assert_eq!(after["transcript_len"], before["transcript_len"]);
    assert_eq!(after["event_count"], before["event_count"]);

    c.post(&format!("/sessions/{id}/finalize"), json!({"force": true}));
    let (_, a) = c.post(&format!("/sessions/{id}/copilot/query"), json!({"question": "how did it go?"}));
    assert_eq!(a["post_op"], true);
    let (status, v) = c.post("/sessions/nope/copilot/query", json!({"question": "x"}));
    assert_eq!((status, code(&v)), (404, "UnknownSession"));
}

#[test]
fn eval_runs_complete_in_the_background() {
    let cfg = config();
    let cases = cfg.cases.clone();
    let spec = cfg.spec.clone();
    let c = start(cfg);
    let ids: Vec<String> = cases.iter().take(3).map(|c| c.case_id.clone()).collect();
    let (status, v) = c.post("/eval/runs", json!({"case_ids": ids, "preset": "rag_off", "seed": 5}));
    assert_eq!(status, 202, "{v}");
    let run_id = v["run_id"].as_str().unwrap().to_string();
    let done = loop {
        let (_, v) = c.get(&format!("/eval/runs/{run_id}"));
        if v["status"] != "running" {
            break v;
        }
        std::thread::sleep(Duration::from_millis(20));
    };
    assert_eq!(done["status"], "done", "{done}");
    let report: orsim_core::eval::EvalReport = serde_json::from_value(done["report"].clone()).unwrap();
    for x in [report.route_accuracy, report.plan_accuracy] {
        assert!((0.0..=100.0).contains(&x));
    }
    assert!(!report.flags.rag_on);
    assert!(done["table"].as_str().unwrap().contains("Route"));

    let flags = orsim_core::eval::AblationFlags::preset("rag_off").unwrap();
    let chosen: Vec<_> = cases.iter().take(3).cloned().collect();
    let direct = run_eval(
        &spec.with_config(orsim_core::workflow::SimConfig::with_flags(flags)),
        &chosen,
        5,
        &EvalConfig::default(),
        None,
    )
    .unwrap();
    assert_eq!(report, direct.report);

    let (status, v) = c.get("/eval/runs/nope");
    assert_eq!((status, code(&v)), (404, "UnknownRun"));
    let (status, v) = c.post("/eval/runs", json!({"case_ids": ["nope"]}));
    assert_eq!((status, code(&v)), (404, "UnknownCase"));
    let (status, v) = c.post("/eval/runs", json!({"preset": "x"}));
    assert_eq!((status, code(&v)), (400, "InvalidConfig"));
}

#[test]
fn cases_are_listed_by_id() {
    let c = start(config());
    let (status, v) = c.get("/cases");
    assert_eq!(status, 200);
    let ids: Vec<&str> = v.as_array().unwrap().iter().map(|c| c["case_id"].as_str().unwrap()).collect();
    let sorted: BTreeSet<&str> = ids.iter().copied().collect();
    assert_eq!(ids, sorted.into_iter().collect::<Vec<_>>());
    assert!(ids.contains(&"case01"));
    let (status, v) = c.get("/cases/case01");
    assert_eq!(status, 200);
    assert_eq!(v["case_id"], "case01");
    let (status, v) = c.get("/cases/zzz");
    assert_eq!((status, code(&v)), (404, "UnknownCase"));
}

#[test]
fn bearer_token_guards_every_api_route() {
    let mut cfg = config();
    cfg.token = Some("s3cret".into());
    let open = start(cfg);
    let authed = open.with_token(Some("s3cret"));
    let wrong = open.with_token(Some("guess"));
    assert_eq!(open.get("/health").0, 200);
    let (status, v) = open.get("/cases");
    assert_eq!((status, code(&v)), (401, "Unauthorized"));
    assert_eq!(wrong.get("/cases").0, 401);
    assert_eq!(open.post("/sessions", json!({"case_id": "case01"})).0, 401);
    assert_eq!(authed.get("/cases").0, 200);

    let id = authed.create(json!({"case_id": "case01", "pace_ms": 1}));
    authed.wait_for(&id, LONG, |v| v["status"] == "finalized");
    assert!(!authed.events(&id, None, usize::MAX).is_empty());
    // Browsers cannot set headers on event streams; the query form works.
    assert_eq!(open.get(&format!("/sessions/{id}/events?token=s3cret")).0, 200);
    assert_eq!(open.get(&format!("/sessions/{id}/events?token=guess")).0, 401);
}
