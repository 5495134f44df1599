//! Acceptance suite: one PASS/FAIL line per headline criterion. Each check
//! compares against an oracle computed here, independent of the code
//! under test. The live check runs only when remote credentials are set.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::sync::Arc;
use std::time::{Duration, Instant};

use orsim_core::copilot::LongMemoryStore;
use orsim_core::domain::{canonicalize_route, DiseaseLabel, PhaseId, PlanStep, Speaker};
use orsim_core::eval::tables::render_ablation_table;
use orsim_core::eval::{
    aggregate_report, classify_failure, score_plan, score_route, score_stage_checkpoints, AblationFlags, CaseResult,
    CheckpointScore, EvalConfig, EvalReport, FailureKind,
};
use orsim_core::fixtures;
use orsim_core::knowledge::{Document, Embedder, HashEmbedder, KnowledgeBank};
use orsim_core::records::read_simulated_report;
use orsim_core::runner::{run_eval, RunSpec, MAX_TURNS};
use orsim_core::synth::{generate_synthetic_cases, uniform_mix};
use orsim_core::workflow::{SimConfig, SimStatus};
use orsim_remote::{RemoteBackend, RemoteConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use tempfile::TempDir;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn orsim(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_orsim"))
        .args(args)
        .current_dir(Path::new(env!("CARGO_MANIFEST_DIR")).join("../.."))
        .output()
        .expect("binary runs")
}

fn run_bin(args: &[&str]) -> Result<(), String> {
    let out = orsim(args);
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn determinism() -> Check {
    let tmp = TempDir::new().map_err(|e| e.to_string())?;
    let mut slowest = Duration::ZERO;
    for dir in ["a", "b"] {
        let out = tmp.path().join(dir);
        let start = Instant::now();
        run_bin(&["run", "--case", "fixtures/case01", "--backend", "scripted", "--seed", "7", "--out", out.to_str().unwrap()])?;
        slowest = slowest.max(start.elapsed());
    }
    for f in ["case01-s7.transcript.jsonl", "case01-s7.report.json"] {
        let a = fs::read(tmp.path().join("a").join(f)).map_err(|e| e.to_string())?;
        let b = fs::read(tmp.path().join("b").join(f)).map_err(|e| e.to_string())?;
        ensure!(a == b, "{f} differs between runs");
    }
    ensure!(slowest < Duration::from_secs(5), "run took {slowest:?}");
    Ok(format!("transcript and report byte-identical; slowest run {:.2} s", slowest.as_secs_f64()))
}

fn closed_loop_coverage() -> Check {
    let spec = RunSpec::fixture(SimConfig::default());
    let cases = generate_synthetic_cases(20, 17, &uniform_mix(), &spec.vocab).map_err(|e| e.to_string())?;
    let mut complete = 0;
    for (seed, case) in cases.iter().enumerate() {
        let out = spec.simulate(case, seed as u64, None, None).map_err(|e| e.to_string())?;
        if out.report.aborted {
            continue;
        }
        ensure!(out.report.status == SimStatus::Finalized, "{}: not finalized", case.case_id);
        let phases: BTreeSet<PhaseId> = out
            .report
            .transcript
            .iter()
            .filter(|u| matches!(u.speaker, Speaker::Role(_)))
            .map(|u| u.phase)
            .collect();
        ensure!(
            phases.len() == PhaseId::ALL.len(),
            "{} seed {seed}: utterances only in {phases:?}",
            case.case_id
        );
        complete += 1;
    }
    ensure!(complete > 0, "every run aborted");
    Ok(format!("{complete}/20 runs finalized, each with role utterances in all five phases"))
}

/// Top-down memoized LCS over step ids.
fn lcs_oracle(a: &[String], b: &[String]) -> usize {
    fn go(a: &[String], b: &[String], i: usize, j: usize, memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if i == a.len() || j == b.len() {
            return 0;
        }
        if let Some(v) = memo.get(&(i, j)) {
            return *v;
        }
        let v = if a[i] == b[j] {
            1 + go(a, b, i + 1, j + 1, memo)
        } else {
            go(a, b, i + 1, j, memo).max(go(a, b, i, j + 1, memo))
        };
        memo.insert((i, j), v);
        v
    }
    go(a, b, 0, 0, &mut HashMap::new())
}

#[derive(Deserialize)]
struct RouteRow {
    predicted: Option<String>,
    gold: String,
    correct: u8,
}

fn result(id: usize, route: u8, plan: f64, comp: [f64; 4], disease: usize) -> CaseResult {
    CaseResult {
        case_id: format!("c{id:03}"),
        disease: DiseaseLabel::KNOWN[disease].clone(),
        sim_id: format!("s{id}"),
        route_score: route,
        plan_score: plan,
        checkpoints: comp
            .iter()
            .zip([0.25, 0.5, 0.75, 1.0])
            .map(|(c, fraction)| CheckpointScore {
                fraction,
                completeness: *c,
                accuracy: 100.0 - *c,
            })
            .collect(),
        failure: None,
        aborted: false,
        error: None,
    }
}

fn metric_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let alphabet = ["a", "b", "c", "d", "e", "f", "g", "h"];
    let ids = |rng: &mut ChaCha8Rng, min: usize| -> Vec<String> {
        let n = rng.gen_range(min..14);
        (0..n).map(|_| alphabet.choose(rng).unwrap().to_string()).collect()
    };
    let steps = |ids: &[String]| -> Vec<PlanStep> {
        ids.iter()
            .map(|s| PlanStep::new(s.clone(), s.clone(), PhaseId::SurgicalOperation))
            .collect()
    };
    for i in 0..200 {
        let (pred, gold) = (ids(&mut rng, 0), ids(&mut rng, 1));
        let got = score_plan(&steps(&pred), &steps(&gold)).map_err(|e| e.to_string())?;
        let want = lcs_oracle(&pred, &gold) as f64 / gold.len() as f64;
        ensure!(got == want, "pair {i}: score_plan {got} vs LCS oracle {want}");
    }

    let rows: Vec<RouteRow> = serde_json::from_str(fixtures::ROUTE_LABELS_JSON).map_err(|e| e.to_string())?;
    let aliases = fixtures::vocabulary().route_aliases;
    let mut results = Vec::new();
    for (i, r) in rows.iter().enumerate() {
        let pred = r.predicted.as_deref().map(|p| canonicalize_route(p, &aliases)).transpose().map_err(|e| e.to_string())?;
        let gold = canonicalize_route(&r.gold, &aliases).map_err(|e| e.to_string())?;
        results.push(result(i, score_route(pred.as_ref(), &gold), 1.0, [100.0; 4], 0));
    }
    let hand = 100.0 * rows.iter().map(|r| f64::from(r.correct)).sum::<f64>() / rows.len() as f64;
    let agg = aggregate_report(&results, AblationFlags::default(), "oracle", 0).map_err(|e| e.to_string())?;
    ensure!(agg.route_accuracy == hand, "route accuracy {} vs hand-labeled {hand}", agg.route_accuracy);

    let mut pool: Vec<CaseResult> = (0..30)
        .map(|i| {
            let comp = [0; 4].map(|_| f64::from(rng.gen_range(0u32..=10_000)) / 100.0);
            result(i, rng.gen_range(0..=1), rng.gen_range(0.0..=1.0), comp, i % 5)
        })
        .collect();
    let reference = aggregate_report(&pool, AblationFlags::default(), "oracle", 0).map_err(|e| e.to_string())?;
    for k in 0..50 {
        pool.shuffle(&mut rng);
        let shuffled = aggregate_report(&pool, AblationFlags::default(), "oracle", 0).map_err(|e| e.to_string())?;
        ensure!(shuffled == reference, "shuffle {k} changed the aggregate");
    }
    Ok(format!(
        "200 plan pairs equal the LCS oracle; route accuracy {hand:.2} equals the hand labels; 50 shuffles invariant"
    ))
}

fn stage_checkpoints() -> Check {
    let (case, executed) = fixtures::half_executed();
    let scores = score_stage_checkpoints(&executed, &case, &EvalConfig::default());
    let got: Vec<f64> = scores.iter().map(|s| s.completeness).collect();
    let want = [100.0, 100.0, 66.7, 50.0];
    ensure!(got.len() == 4, "{} checkpoints", got.len());
    for (g, w) in got.iter().zip(want) {
        ensure!((g - w).abs() <= 0.1, "completeness {got:?}, expected {want:?}");
    }
    Ok(format!("completeness {got:.1?} at 25/50/75/100%"))
}

fn retrieval_oracle() -> Check {
    let start = Instant::now();
    let words = [
        "sellar", "dura", "carotid", "chiasm", "tumor", "resection", "csf", "leak", "graft", "flap", "bleeding", "knosp",
        "cavernous", "sinus", "endoscope", "microscope", "airway", "induction", "pressure", "suction", "drape",
        "count", "closure", "pituitary",
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let sentence = |rng: &mut ChaCha8Rng| {
        let n = rng.gen_range(3..12);
        (0..n).map(|_| *words.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
    };
    let emb = HashEmbedder::default();
    let mut bank = KnowledgeBank::new("acceptance", &emb);
    for i in 0..500 {
        let doc = Document::new(format!("d{i:03}"), sentence(&mut rng));
        bank.ingest_document(&doc, 800, 100, &emb).map_err(|e| e.to_string())?;
    }
    bank.build();
    ensure!(bank.len() == 500, "bank has {} chunks", bank.len());
    for _ in 0..100 {
        let q = sentence(&mut rng);
        let k = rng.gen_range(1..=10);
        let got: Vec<String> = bank
            .retrieve_top_k(&q, k, &emb)
            .map_err(|e| e.to_string())?
            .into_iter()
            .map(|s| s.chunk.chunk_id)
            .collect();
        let qv = emb.embed(&q).map_err(|e| e.to_string())?;
        let norm = |v: &[f32]| v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
        let mut scan: Vec<(f64, String)> = bank
            .chunks
            .iter()
            .map(|c| {
                let dot: f64 = c.embedding.iter().zip(&qv).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum();
                let d = norm(&c.embedding) * norm(&qv);
                (if d == 0.0 { 0.0 } else { dot / d }, c.chunk_id.clone())
            })
            .collect();
        scan.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        let want: Vec<String> = scan.into_iter().take(k).map(|s| s.1).collect();
        ensure!(got == want, "query `{q}` k={k}: {got:?} vs scan {want:?}");
    }
    let took = start.elapsed();
    ensure!(took < Duration::from_secs(10), "took {took:?}");
    Ok(format!("100 queries over 500 chunks match a brute-force cosine scan ({:.2} s)", took.as_secs_f64()))
}

fn memory_lifecycle() -> Check {
    let spec = RunSpec::fixture(SimConfig::default());
    let store = Arc::new(LongMemoryStore::in_memory());
    let cases = generate_synthetic_cases(25, 31, &uniform_mix(), &spec.vocab).map_err(|e| e.to_string())?;
    let mut ids = BTreeSet::new();
    let mut lessons = 0;
    for (i, case) in cases.iter().enumerate() {
        let before = store.len();
        let mut sim = spec.create(case.clone(), i as u64, None, Some(&store)).map_err(|e| e.to_string())?;
        let snapshot = store.snapshot();
        for l in store.retrieve_experience(case, 3) {
            let rec = snapshot.records().iter().find(|r| r.record_id == l.record_id);
            ensure!(
                rec.is_some_and(|r| r.disease == case.disease_label),
                "lesson {} for {} comes from another disease",
                l.lesson_id,
                case.case_id
            );
            lessons += 1;
        }
        sim.run_to_completion(MAX_TURNS).map_err(|e| e.to_string())?;
        sim.finalize(true).map_err(|e| e.to_string())?;
        ensure!(sim.short_memory().is_empty(), "sim {i}: short memory not cleared");
        ensure!(store.len() == before + 1, "sim {i}: long memory {before} -> {}", store.len());
        let id = sim.record_id().ok_or(format!("sim {i}: no record id"))?.to_string();
        ensure!(ids.insert(id.clone()), "duplicate record id {id}");
    }
    ensure!(lessons > 0, "no lesson was ever retrieved");
    Ok(format!("25 sims, 25 unique records, {lessons} retrieved lessons all disease-matched"))
}

fn ablation_plumbing() -> Check {
    let base = RunSpec::fixture(SimConfig::default());
    let cases = generate_synthetic_cases(20, 8, &uniform_mix(), &base.vocab).map_err(|e| e.to_string())?;
    let presets = ["full", "rag_off", "copilot_off", "memory_off"];
    let mut reports: Vec<EvalReport> = Vec::new();
    for p in presets {
        let flags = AblationFlags::preset(p).ok_or(format!("no preset {p}"))?;
        let spec = base.with_config(SimConfig::with_flags(flags));
        let run = run_eval(&spec, &cases, 5, &EvalConfig::default(), None).map_err(|e| e.to_string())?;
        reports.push(run.report);
    }
    let prints: BTreeSet<&str> = reports.iter().map(|r| r.fingerprint.as_str()).collect();
    ensure!(prints.len() == 4, "fingerprints not distinct: {prints:?}");
    ensure!(reports.iter().all(|r| r.case_ids == reports[0].case_ids), "case lists differ");
    ensure!(reports[0].case_ids.len() == 20, "{} cases", reports[0].case_ids.len());
    let rows: Vec<(&str, &EvalReport)> = presets.iter().copied().zip(&reports).collect();
    let table = render_ablation_table(&rows);
    let lines: Vec<&str> = table.lines().filter(|l| l.starts_with('|')).collect();
    ensure!(lines.len() == 6, "table has {} rows", lines.len());
    let cols = lines[0].matches('|').count();
    ensure!(lines.iter().all(|l| l.matches('|').count() == cols), "ragged table");
    for h in ["Copilot", "RAG", "Long memory", "Surgical Route", "Surgical Plan"] {
        ensure!(lines[0].contains(h), "header lacks {h}");
    }
    for (p, l) in presets.iter().zip(&lines[2..]) {
        ensure!(l.starts_with(&format!("| {p} |")), "row order: {l}");
    }
    Ok("4 presets, distinct fingerprints, identical 20-case lists, comparison table well-formed".into())
}

fn failure_taxonomy() -> Check {
    let cfg = EvalConfig::default();
    let want = [
        FailureKind::MisjudgedInitialApproach,
        FailureKind::MultiSituationOverload,
        FailureKind::RareDiseaseHallucination,
    ];
    let fixtures = fixtures::failure_fixtures();
    ensure!(fixtures.len() == 3, "{} fixtures", fixtures.len());
    let mut seen = Vec::new();
    for (constructed, report, case) in &fixtures {
        let got = classify_failure(report, case, &cfg);
        ensure!(got == Some(*constructed), "fixture built as {constructed:?} classified as {got:?}");
        seen.push(*constructed);
    }
    seen.sort();
    let mut w = want.to_vec();
    w.sort();
    ensure!(seen == w, "fixtures cover {seen:?}");
    Ok("wrong route, overload and hallucination fixtures classify as constructed".into())
}

fn batch_generation() -> Check {
    let tmp = TempDir::new().map_err(|e| e.to_string())?;
    let out = tmp.path().join("batch");
    let start = Instant::now();
    run_bin(&["batch", "--n", "1000", "--seed", "42", "--corpus", "synthetic20", "--out", out.to_str().unwrap()])?;
    let took = start.elapsed();
    let mut ids = BTreeSet::new();
    let entries = fs::read_dir(&out).map_err(|e| e.to_string())?;
    for e in entries {
        let path = e.map_err(|e| e.to_string())?.path();
        let report = read_simulated_report(&path).map_err(|e| e.to_string())?;
        ensure!(ids.insert(report.sim_id.clone()), "duplicate sim id {}", report.sim_id);
    }
    ensure!(ids.len() == 1000, "{} reports", ids.len());
    ensure!(took < Duration::from_secs(300), "took {took:?}");
    Ok(format!("1000 reports parse with unique sim ids ({:.1} s)", took.as_secs_f64()))
}

fn live_smoke() -> Option<Check> {
    if !RemoteConfig::env_present() {
        return None;
    }
    Some((|| {
        let backend = RemoteBackend::from_env().map_err(|e| e.to_string())?;
        let spec = RunSpec {
            backend: Arc::new(backend),
            ..RunSpec::fixture(SimConfig::default())
        };
        spec.simulate(&fixtures::case01(), 7, None, None).map_err(|e| format!("{}: {e}", e.code()))?;
        let cases = generate_synthetic_cases(5, 1, &uniform_mix(), &spec.vocab).map_err(|e| e.to_string())?;
        let run = run_eval(&spec, &cases, 1, &EvalConfig::default(), None).map_err(|e| e.to_string())?;
        let failed: Vec<_> = run.results.iter().filter_map(|r| r.error.clone()).collect();
        ensure!(failed.is_empty(), "errored cases: {failed:?}");
        Ok(format!(
            "one sim and a 5-case eval completed; route {:.2}, plan {:.2}",
            run.report.route_accuracy, run.report.plan_accuracy
        ))
    })())
}

fn main() -> ExitCode {
    let checks: [(&str, fn() -> Check); 9] = [
        ("determinism", determinism),
        ("closed-loop coverage", closed_loop_coverage),
        ("metric oracles", metric_oracles),
        ("stage checkpoints", stage_checkpoints),
        ("retrieval oracle", retrieval_oracle),
        ("memory lifecycle", memory_lifecycle),
        ("ablation plumbing", ablation_plumbing),
        ("failure taxonomy", failure_taxonomy),
        ("batch generation", batch_generation),
    ];
    let mut failed = 0;
    let total = checks.len();
    for (name, check) in checks {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    match live_smoke() {
        None => println!("SKIP  live smoke: ORSIM_API_BASE, ORSIM_API_KEY and ORSIM_MODEL not set"),
        Some(Ok(detail)) => println!("PASS  live smoke: {detail}"),
        Some(Err(why)) => {
            failed += 1;
            println!("FAIL  live smoke: {why}");
        }
    }
    println!("acceptance: {} of {total} required checks passed", total - failed.min(total));
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
