//! One function per subcommand.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use orsim_core::eval::tables::{render_ablation_table, render_report};
use orsim_core::eval::{EvalConfig, EvalReport};
use orsim_core::knowledge::KnowledgeBank;
use orsim_core::records::{
    compact_long_memory, eval_report_to_string, load_case, load_documents, parse_report, parse_transcript,
    report_to_string, transcript_to_string, write_atomic, write_corpus,
};
use orsim_core::runner::{run_batch_item, run_eval};
use orsim_core::synth::{generate_synthetic_cases, uniform_mix};
use orsim_core::fixtures;
use orsim_core::workflow::{derive_report, verify_transcript, SimulatedReport};
use orsim_server::{AppState, ServerConfig};
use serde_json::Value;

use crate::args::{BatchArgs, CompactArgs, EvalArgs, GenCasesArgs, IngestArgs, ReplayArgs, RunArgs, ServeArgs};
use crate::{
    embedder, load_cases, load_vocabulary, open_memory, preset_flags, read_text, resolve_case_path, CliError, Outputs,
};

pub const TRANSCRIPT_SUFFIX: &str = ".transcript.jsonl";
pub const REPORT_SUFFIX: &str = ".report.json";

pub fn run(a: RunArgs) -> Result<(), CliError> {
    let spec = a.engine.spec(fixtures::vocabulary(), preset_flags(&a.preset)?)?;
    let case = load_case(&resolve_case_path(&a.case), &spec.vocab)?;
    let memory = open_memory(a.memory.as_deref())?;
    let out = spec.simulate(&case, a.seed, None, memory.as_ref())?;

    let stem = format!("{}-s{}", case.case_id, a.seed);
    let transcript = a.out.join(format!("{stem}{TRANSCRIPT_SUFFIX}"));
    let report = a.out.join(format!("{stem}{REPORT_SUFFIX}"));
    let mut outputs = Outputs::default();
    outputs.write(&transcript, &transcript_to_string(&out.header, &out.report.transcript))?;
    outputs.write(&report, &report_to_string(&out.report))?;
    outputs.commit();
    println!("{}", transcript.display());
    println!("{}", report.display());
    if out.report.aborted {
        eprintln!("warning: episode aborted before completing all phases");
    }
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<(), CliError> {
    let (cases, vocab) = load_cases(&a.corpus)?;
    let mut presets: Vec<&str> = Vec::new();
    for p in &a.presets {
        if !presets.contains(&p.as_str()) {
            presets.push(p);
        }
    }
    let cfg = EvalConfig::default();
    let mut outputs = Outputs::default();
    let mut reports: Vec<EvalReport> = Vec::new();
    for preset in &presets {
        let spec = a.engine.spec(vocab.clone(), preset_flags(preset)?)?;
        let run = run_eval(&spec, &cases, a.seed, &cfg, None)?;
        outputs.write(&a.out.join(format!("eval-{preset}.json")), &eval_report_to_string(&run.report))?;
        let lines: String = run
            .results
            .iter()
            .map(|r| serde_json::to_string(r).expect("case result serializes") + "\n")
            .collect();
        outputs.write(&a.out.join(format!("cases-{preset}.jsonl")), &lines)?;
        reports.push(run.report);
    }
    let rows: Vec<(&str, &EvalReport)> = presets.iter().copied().zip(&reports).collect();
    let mut table = String::new();
    if rows.len() > 1 {
        table.push_str(&render_ablation_table(&rows));
        table.push('\n');
    }
    for (label, report) in &rows {
        table.push_str(&render_report(label, report));
        table.push('\n');
    }
    outputs.write(&a.out.join("table.txt"), &table)?;
    // The reports are complete even when some cases errored, so they are
    // kept; the exit code still signals the errors.
    outputs.commit();
    print!("{table}");
    let errored: usize = reports.iter().map(|r| r.errored_cases).sum();
    if errored > 0 {
        return Err(CliError::domain(
            "CasesErrored",
            format!("{errored} case run(s) errored; see cases-<preset>.jsonl"),
        ));
    }
    Ok(())
}

pub fn batch(a: BatchArgs) -> Result<(), CliError> {
    let (cases, vocab) = load_cases(&a.corpus)?;
    if a.n == 0 {
        return Err(CliError::usage("InvalidConfig", "--n must be at least 1"));
    }
    let jobs = match a.jobs {
        Some(0) => return Err(CliError::usage("InvalidConfig", "--jobs must be at least 1")),
        Some(j) => j,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let spec = a.engine.spec(vocab, preset_flags(&a.preset)?)?;
    let mut outputs = Outputs::default();
    outputs.dir(&a.out)?;

    let started = Instant::now();
    let next = AtomicUsize::new(0);
    let written: Mutex<Vec<PathBuf>> = Mutex::default();
    let failure: Mutex<Option<CliError>> = Mutex::default();
    std::thread::scope(|s| {
        for _ in 0..jobs.min(a.n) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= a.n || failure.lock().expect("failure lock").is_some() {
                    break;
                }
                let result = run_batch_item(&spec, &cases, a.seed, i)
                    .map_err(CliError::from)
                    .and_then(|out| {
                        let path = a.out.join(format!("{}{REPORT_SUFFIX}", out.report.sim_id));
                        write_atomic(&path, &report_to_string(&out.report))?;
                        Ok(path)
                    });
                match result {
                    Ok(path) => written.lock().expect("written lock").push(path),
                    Err(e) => {
                        failure.lock().expect("failure lock").get_or_insert(e);
                    }
                }
            });
        }
    });
    for p in written.into_inner().expect("written lock") {
        outputs.track(p);
    }
    if let Some(e) = failure.into_inner().expect("failure lock") {
        return Err(e);
    }
    outputs.commit();
    println!(
        "{} reports in {} ({:.1} s, {jobs} jobs)",
        a.n,
        a.out.display(),
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

pub fn ingest(a: IngestArgs) -> Result<(), CliError> {
    let docs = load_documents(&a.docs)?;
    if docs.is_empty() {
        return Err(CliError::domain(
            "NoDocuments",
            format!("{}: no .md or .txt documents", a.docs.display()),
        ));
    }
    let emb = embedder(a.embedder)?;
    let mut bank = KnowledgeBank::new(a.bank_id.clone(), emb.as_ref());
    for doc in &docs {
        bank.ingest_document(doc, a.chunk_size, a.overlap, emb.as_ref())?;
    }
    bank.build();
    let mut outputs = Outputs::default();
    outputs.write(&a.out, &bank.to_file_string())?;
    outputs.commit();
    println!(
        "bank `{}`: {} chunks from {} documents -> {}",
        a.bank_id,
        bank.len(),
        docs.len(),
        a.out.display()
    );
    Ok(())
}

pub fn gen_cases(a: GenCasesArgs) -> Result<(), CliError> {
    let non_empty = a.out.read_dir().map(|mut d| d.next().is_some()).unwrap_or(false);
    if non_empty || a.out.is_file() {
        return Err(CliError::usage(
            "OutputExists",
            format!("{} exists and is not an empty directory", a.out.display()),
        ));
    }
    let vocab = fixtures::vocabulary();
    let cases = generate_synthetic_cases(a.n, a.seed, &uniform_mix(), &vocab)?;
    let corpus_id = a.corpus_id.unwrap_or_else(|| format!("synthetic-{}-s{}", a.n, a.seed));
    let mut outputs = Outputs::default();
    let cases_dir = a.out.join("cases");
    outputs.dir(&cases_dir)?;
    // The directory was empty, so a failed write is cleaned up file by file.
    let manifest = write_corpus(&a.out, &corpus_id, &cases, &vocab, true);
    outputs.track(a.out.join(orsim_core::records::MANIFEST_FILE));
    for c in &cases {
        outputs.track(cases_dir.join(format!("{}.json", c.case_id)));
    }
    let manifest = manifest?;
    outputs.commit();
    println!("{} cases -> {}", cases.len(), manifest.display());
    Ok(())
}

/// Path of the report written next to a transcript by `run`.
fn sibling_report(transcript: &Path) -> Option<PathBuf> {
    let name = transcript.file_name()?.to_str()?;
    let stem = name.strip_suffix(TRANSCRIPT_SUFFIX)?;
    Some(transcript.with_file_name(format!("{stem}{REPORT_SUFFIX}")))
}

/// Top-level report fields whose values differ.
fn differing_fields(a: &SimulatedReport, b: &SimulatedReport) -> Vec<String> {
    let (Value::Object(a), Value::Object(b)) = (
        serde_json::to_value(a).expect("report serializes"),
        serde_json::to_value(b).expect("report serializes"),
    ) else {
        return Vec::new();
    };
    a.iter()
        .filter(|(k, v)| b.get(*k) != Some(*v))
        .map(|(k, _)| k.clone())
        .collect()
}

pub fn replay(a: ReplayArgs) -> Result<(), CliError> {
    let vocab = load_vocabulary(&a.vocabulary)?;
    let shown = a.transcript.display().to_string();
    let text = read_text(&a.transcript)?;
    let (header, transcript) = parse_transcript(&text, &shown)?;

    let mut problems = Vec::new();
    let rendered = transcript_to_string(&header, &transcript);
    if rendered != text {
        let line = rendered
            .lines()
            .zip(text.lines())
            .position(|(x, y)| x != y)
            .unwrap_or_else(|| rendered.lines().count().min(text.lines().count()));
        problems.push(format!("transcript does not re-render identically (first difference on line {})", line + 1));
    }
    problems.extend(verify_transcript(&header, &transcript, &vocab));

    let derived = derive_report(&header, &transcript, &vocab);
    let report_path = a.report.clone().or_else(|| sibling_report(&a.transcript).filter(|p| p.exists()));
    if let Some(path) = &report_path {
        let stored_text = read_text(path)?;
        let stored = parse_report(&stored_text, &path.display().to_string())?;
        if derived != stored {
            problems.push(format!(
                "derived report differs from {} in: {}",
                path.display(),
                differing_fields(&derived, &stored).join(", ")
            ));
        } else if report_to_string(&derived) != stored_text {
            problems.push(format!("{} does not re-render identically", path.display()));
        }
    }

    if !problems.is_empty() {
        return Err(CliError::domain(
            "ReplayMismatch",
            format!("{shown}:\n  {}", problems.join("\n  ")),
        ));
    }
    println!(
        "replay ok: {} utterances, {} executed subtasks{}",
        transcript.len(),
        derived.executed_subtasks.len(),
        report_path.map_or(String::new(), |p| format!(", matches {}", p.display()))
    );
    Ok(())
}

pub fn serve(a: ServeArgs) -> Result<(), CliError> {
    if a.pace_ms == 0 || a.human_timeout_s == 0 {
        return Err(CliError::usage("InvalidConfig", "--pace-ms and --human-timeout-s must be positive"));
    }
    let (cases, vocab) = load_cases(&a.corpus)?;
    let spec = a.engine.spec(vocab, preset_flags("full")?)?;
    let mut config = ServerConfig::new(spec, cases);
    config.token = a.token.filter(|t| !t.is_empty());
    config.pace = Duration::from_millis(a.pace_ms);
    config.human_timeout = Duration::from_secs(a.human_timeout_s);
    config.long_memory = open_memory(a.memory.as_deref())?;

    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::domain("IoError", e.to_string()))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&a.addr)
            .await
            .map_err(|e| CliError::domain("IoError", format!("bind {}: {e}", a.addr)))?;
        let addr = listener
            .local_addr()
            .map_err(|e| CliError::domain("IoError", e.to_string()))?;
        println!("listening on http://{addr}");
        orsim_server::serve(listener, AppState::new(config))
            .await
            .map_err(|e| CliError::domain("IoError", e.to_string()))
    })
}

pub fn compact(a: CompactArgs) -> Result<(), CliError> {
    let n = compact_long_memory(&a.memory)?;
    println!("{n} records in {}", a.memory.display());
    Ok(())
}
