//! Records I/O: case, corpus, transcript, report and long-memory files,
//! plus the synthetic case generator.

use std::collections::BTreeMap;

use orsim_core::domain::DiseaseLabel;
use orsim_core::fixtures;
use orsim_core::records::{
    case_to_string, load_case, load_corpus, parse_case, parse_eval_report, parse_long_memory, parse_report,
    parse_transcript, read_simulated_report, report_to_string, transcript_to_string, write_atomic, write_corpus,
    write_simulated_report,
};
use orsim_core::runner::{run_eval, RunSpec};
use orsim_core::synth::{generate_synthetic_cases, uniform_mix};
use orsim_core::workflow::SimConfig;
use proptest::prelude::*;

#[test]
fn cases_round_trip_through_text() {
    let vocab = fixtures::vocabulary();
    for c in generate_synthetic_cases(30, 4, &uniform_mix(), &vocab).unwrap() {
        let text = case_to_string(&c, true);
        assert!(text.contains("\"synthetic\": true"));
        assert_eq!(parse_case(&text, &vocab, "mem").unwrap(), c);
    }
}

#[test]
fn corpus_round_trip_and_manifest_counts() {
    let vocab = fixtures::vocabulary();
    let cases = generate_synthetic_cases(40, 9, &uniform_mix(), &vocab).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_corpus(dir.path(), "synth-9", &cases, &vocab, true).unwrap();
    let corpus = load_corpus(dir.path()).unwrap();
    assert_eq!(corpus.cases, load_corpus(&manifest).unwrap().cases);
    assert_eq!(corpus.cases, cases);
    let mut diseases: BTreeMap<String, usize> = BTreeMap::new();
    let mut routes: BTreeMap<String, usize> = BTreeMap::new();
    for c in &cases {
        *diseases.entry(c.disease_label.code().to_string()).or_default() += 1;
        *routes.entry(c.gold_route.as_str().to_string()).or_default() += 1;
    }
    assert_eq!(corpus.manifest.disease_distribution, diseases);
    assert_eq!(corpus.manifest.route_distribution, routes);
    assert!(corpus.manifest.synthetic);
}

/// Largest-remainder counts in exact integer arithmetic.
fn apportion_oracle(n: usize, weights: &[(DiseaseLabel, usize)]) -> BTreeMap<DiseaseLabel, usize> {
    let total: usize = weights.iter().map(|w| w.1).sum();
    let mut counts: BTreeMap<DiseaseLabel, usize> = weights.iter().map(|(d, w)| (d.clone(), n * w / total)).collect();
    let left = n - counts.values().sum::<usize>();
    let mut rems: Vec<(usize, &DiseaseLabel)> = weights.iter().map(|(d, w)| ((n * w) % total, d)).collect();
    rems.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(b.1)));
    for (_, d) in rems.into_iter().take(left) {
        *counts.get_mut(d).unwrap() += 1;
    }
    counts
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn synthetic_histogram_matches_apportionment(
        n in 1usize..120,
        seed in any::<u64>(),
        w in prop::collection::vec(0usize..6, 5).prop_filter("some weight", |w| w.iter().any(|x| *x > 0)),
    ) {
        let vocab = fixtures::vocabulary();
        let weights: Vec<(DiseaseLabel, usize)> = DiseaseLabel::KNOWN.iter().cloned().zip(w.iter().copied()).collect();
        let mix: BTreeMap<DiseaseLabel, f64> = weights.iter().map(|(d, w)| (d.clone(), *w as f64)).collect();
        let cases = generate_synthetic_cases(n, seed, &mix, &vocab).unwrap();
        prop_assert_eq!(cases.len(), n);
        let mut got: BTreeMap<DiseaseLabel, usize> = weights.iter().map(|(d, _)| (d.clone(), 0)).collect();
        for c in &cases {
            *got.get_mut(&c.disease_label).unwrap() += 1;
        }
        prop_assert_eq!(got, apportion_oracle(n, &weights));
        let ids: std::collections::BTreeSet<_> = cases.iter().map(|c| &c.case_id).collect();
        prop_assert_eq!(ids.len(), n);
    }
}

#[test]
fn generator_is_deterministic_per_seed() {
    let vocab = fixtures::vocabulary();
    let a = generate_synthetic_cases(25, 1, &uniform_mix(), &vocab).unwrap();
    let b = generate_synthetic_cases(25, 1, &uniform_mix(), &vocab).unwrap();
    let c = generate_synthetic_cases(25, 2, &uniform_mix(), &vocab).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(generate_synthetic_cases(0, 1, &uniform_mix(), &vocab).unwrap_err().code(), "InvalidConfig");
    let zero: BTreeMap<DiseaseLabel, f64> = DiseaseLabel::KNOWN.iter().map(|d| (d.clone(), 0.0)).collect();
    assert_eq!(generate_synthetic_cases(5, 1, &zero, &vocab).unwrap_err().code(), "InvalidMix");
}

#[test]
fn error_codes_name_the_failure() {
    let vocab = fixtures::vocabulary();
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(load_case(&dir.path().join("missing.json"), &vocab).unwrap_err().code(), "IoError");
    let err = parse_case("{ not json", &vocab, "bad.json").unwrap_err();
    assert_eq!(err.code(), "ParseError");
    assert!(err.to_string().starts_with("bad.json: line 1"));
    let bumped = fixtures::CASE01_JSON.replace("\"format_version\": \"1.0\"", "\"format_version\": \"2.0\"");
    assert_eq!(parse_case(&bumped, &vocab, "v.json").unwrap_err().code(), "VersionError");
    let minor = fixtures::CASE01_JSON.replace("\"format_version\": \"1.0\"", "\"format_version\": \"1.3\"");
    assert!(parse_case(&minor, &vocab, "v.json").is_ok());
    let empty_plan = {
        let mut v: serde_json::Value = serde_json::from_str(fixtures::CASE01_JSON).unwrap();
        v["gold_plan"] = serde_json::json!([]);
        v.to_string()
    };
    assert_eq!(parse_case(&empty_plan, &vocab, "p.json").unwrap_err().code(), "ValidationError");
    assert_eq!(load_corpus(dir.path()).unwrap_err().code(), "IoError");
}

#[test]
fn reports_and_transcripts_round_trip() {
    let spec = RunSpec::fixture(SimConfig::default());
    let out = spec.simulate(&fixtures::case01(), 7, None, None).unwrap();
    let text = report_to_string(&out.report);
    assert_eq!(parse_report(&text, "r").unwrap(), out.report);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.json");
    write_simulated_report(&out.report, &path).unwrap();
    assert_eq!(read_simulated_report(&path).unwrap(), out.report);

    let t = transcript_to_string(&out.header, &out.report.transcript);
    assert_eq!(t.lines().count(), out.report.transcript.len() + 1);
    let (h, u) = parse_transcript(&t, "t").unwrap();
    assert_eq!(h, out.header);
    assert_eq!(u, out.report.transcript);
    assert_eq!(parse_transcript("{}\n", "t").unwrap_err().code(), "ParseError");
}

#[test]
fn eval_reports_and_long_memory_round_trip() {
    let vocab = fixtures::vocabulary();
    let spec = RunSpec::fixture(SimConfig::default());
    let cases = generate_synthetic_cases(6, 3, &uniform_mix(), &vocab).unwrap();
    let store = std::sync::Arc::new(orsim_core::copilot::LongMemoryStore::in_memory());
    let run = run_eval(&spec, &cases, 3, &Default::default(), Some(store.clone())).unwrap();
    let text = orsim_core::records::eval_report_to_string(&run.report);
    assert_eq!(parse_eval_report(&text, "e").unwrap(), run.report);

    let mem = store.snapshot();
    assert_eq!(mem.len(), 6);
    let text = orsim_core::records::long_memory_to_string(&mem);
    assert_eq!(parse_long_memory(&text).unwrap(), mem);
    let doubled = format!("{text}{}", text.lines().nth(1).unwrap());
    assert!(parse_long_memory(&doubled).is_err());
}

#[test]
fn atomic_writes_leave_no_temporary_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("out.txt");
    write_atomic(&path, "one").unwrap();
    write_atomic(&path, "two").unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap(), "two");
    let names: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names.len(), 1);
    assert_eq!(
        write_atomic(&dir.path().join("no/such/dir/x"), "x").unwrap_err().code(),
        "IoError"
    );
}
