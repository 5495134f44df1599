//! The `orsim` binary driven as an operator would: flags, exit codes,
//! output files and cleanup on failure.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use clap::CommandFactory;
use orsim_cli::Cli;
use orsim_core::eval::EvalReport;
use orsim_core::records::{parse_eval_report, read_simulated_report};
use tempfile::TempDir;

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn orsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_orsim"))
        .args(args)
        .current_dir(root())
        .env_remove("ORSIM_API_BASE")
        .env_remove("ORSIM_API_KEY")
        .env_remove("ORSIM_MODEL")
        .env_remove("ORSIM_TOKEN")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = orsim(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files_in(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .map(|d| d.map(|e| e.unwrap().file_name().to_string_lossy().to_string()).collect())
        .unwrap_or_default();
    v.sort();
    v
}

#[test]
fn run_twice_gives_byte_identical_files() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let start = Instant::now();
    ok(&["run", "--case", "fixtures/case01", "--backend", "scripted", "--seed", "7", "--out", s(&a)]);
    assert!(start.elapsed() < Duration::from_secs(5));
    ok(&["run", "--case", "fixtures/case01.json", "--seed", "7", "--out", s(&b)]);
    assert_eq!(files_in(&a), ["case01-s7.report.json", "case01-s7.transcript.jsonl"]);
    for f in files_in(&a) {
        assert_eq!(fs::read(a.join(&f)).unwrap(), fs::read(b.join(&f)).unwrap(), "{f}");
    }
    // A different seed is a different run.
    let c = tmp.path().join("c");
    ok(&["run", "--case", "fixtures/case01", "--seed", "8", "--out", s(&c)]);
    let r7 = read_simulated_report(&a.join("case01-s7.report.json")).unwrap();
    let r8 = read_simulated_report(&c.join("case01-s8.report.json")).unwrap();
    assert_ne!(r7.fingerprint_digest, r8.fingerprint_digest);
}

#[test]
fn replay_accepts_untouched_output_and_rejects_tampering() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    ok(&["run", "--case", "fixtures/case01", "--seed", "7", "--out", s(dir)]);
    let transcript = dir.join("case01-s7.transcript.jsonl");
    let stdout = ok(&["replay", "--transcript", s(&transcript)]);
    assert!(stdout.starts_with("replay ok"), "{stdout}");

    let original = fs::read_to_string(&transcript).unwrap();

    // An edited utterance no longer matches the stored report.
    let edited = original.replacen("\"text\":\"", "\"text\":\"Tampered. ", 1);
    assert_ne!(edited, original);
    fs::write(&transcript, &edited).unwrap();
    let out = orsim(&["replay", "--transcript", s(&transcript)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("ReplayMismatch"), "{}", stderr(&out));
    assert!(stderr(&out).contains("derived report differs"), "{}", stderr(&out));

    // A swapped route directive contradicts its recorded action even
    // without the report to compare against.
    let route = "select_route=endoscopic endonasal transsphenoidal";
    assert!(original.contains(route), "reference transcript selects a route");
    fs::write(&transcript, original.replacen(route, "select_route=craniotomy", 1)).unwrap();
    let alone = dir.join("alone.transcript.jsonl");
    fs::copy(&transcript, &alone).unwrap();
    let out = orsim(&["replay", "--transcript", s(&alone)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("recorded action does not match its text"), "{}", stderr(&out));

    // Reformatted JSON re-parses but does not re-render identically.
    let spaced = original.replacen("\",\"", "\", \"", 1);
    fs::write(&alone, spaced).unwrap();
    let out = orsim(&["replay", "--transcript", s(&alone)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("re-render"), "{}", stderr(&out));
}

#[test]
fn eval_over_synthetic128_reports_bounded_percentages() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("eval");
    let table = ok(&["eval", "--corpus", "synthetic128", "--backend", "scripted", "--out", s(&out)]);
    assert_eq!(files_in(&out), ["cases-full.jsonl", "eval-full.json", "table.txt"]);
    let text = fs::read_to_string(out.join("eval-full.json")).unwrap();
    let report = parse_eval_report(&text, "eval-full.json").unwrap();
    assert_eq!(report.n_cases, 128);
    assert_eq!(report.errored_cases, 0);
    let mut pcts = vec![report.route_accuracy, report.plan_accuracy];
    for c in &report.checkpoints {
        pcts.extend([c.completeness, c.accuracy]);
    }
    for d in report.per_disease.values() {
        pcts.extend([d.route_accuracy, d.plan_accuracy]);
    }
    assert!(pcts.iter().all(|p| (0.0..=100.0).contains(p)), "{pcts:?}");
    assert_eq!(fs::read_to_string(out.join("table.txt")).unwrap(), table);
    assert_eq!(fs::read_to_string(out.join("cases-full.jsonl")).unwrap().lines().count(), 128);
}

#[test]
fn repeated_presets_render_an_ablation_comparison() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("abl");
    let presets = ["full", "rag_off", "copilot_off", "memory_off"];
    let mut args = vec!["eval", "--corpus", "synthetic20", "--seed", "3", "--out", s(&out)];
    for p in presets {
        args.extend(["--preset", p]);
    }
    let table = ok(&args);
    let reports: Vec<EvalReport> = presets
        .iter()
        .map(|p| {
            let text = fs::read_to_string(out.join(format!("eval-{p}.json"))).unwrap();
            parse_eval_report(&text, p).unwrap()
        })
        .collect();
    let mut digests: Vec<_> = reports.iter().map(|r| r.fingerprint.clone()).collect();
    digests.sort();
    digests.dedup();
    assert_eq!(digests.len(), 4);
    assert!(reports.iter().all(|r| r.case_ids == reports[0].case_ids));
    let header = table.lines().next().unwrap();
    assert!(header.contains("Setting") && header.contains("Surgical Route"), "{header}");
    for p in presets {
        assert!(table.lines().any(|l| l.starts_with(&format!("| {p} |"))), "row for {p}");
    }
}

#[test]
fn eval_exits_nonzero_when_a_case_errors() {
    let tmp = TempDir::new().unwrap();
    let triggers = tmp.path().join("bad.json");
    fs::write(
        &triggers,
        r#"[{"event_id":"x","phase":"surgical_operation","pattern":"(","payload":"p","priority":1,"adds_subtasks":[]}]"#,
    )
    .unwrap();
    let out_dir = tmp.path().join("eval");
    let out = orsim(&["eval", "--corpus", "synthetic5", "--triggers", s(&triggers), "--out", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    assert!(stderr(&out).contains("CasesErrored"));
    let text = fs::read_to_string(out_dir.join("eval-full.json")).unwrap();
    assert_eq!(parse_eval_report(&text, "x").unwrap().errored_cases, 5);
}

#[test]
fn help_documents_every_flag() {
    let mut cmd = Cli::command();
    cmd.build();
    for sub in cmd.get_subcommands() {
        let name = sub.get_name().to_string();
        if name == "help" {
            continue;
        }
        let help = ok(&[&name, "--help"]);
        for arg in sub.get_arguments() {
            let Some(long) = arg.get_long() else { continue };
            assert!(help.contains(&format!("--{long}")), "{name} --help lacks --{long}");
            if long != "help" && long != "version" {
                assert!(arg.get_help().is_some(), "{name} --{long} has no help text");
            }
        }
    }
}

#[test]
fn usage_errors_exit_with_code_2() {
    for sub in ["run", "eval", "batch", "ingest", "gen-cases", "replay", "serve", "compact"] {
        let out = orsim(&[sub, "--no-such-flag"]);
        assert_eq!(out.status.code(), Some(2), "{sub}");
        assert!(stderr(&out).contains("--no-such-flag"));
    }
    assert_eq!(orsim(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(orsim(&["run", "--case", "fixtures/case01", "--preset", "nope"]).status.code(), Some(2));
    assert_eq!(orsim(&["run", "--case", "fixtures/case01", "--seed", "x"]).status.code(), Some(2));
    assert_eq!(orsim(&["eval", "--corpus", "syntheticX"]).status.code(), Some(2));

    let tmp = TempDir::new().unwrap();
    let out = orsim(&["run", "--case", "fixtures/case01", "--backend", "remote", "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("MissingCredentials"));
    assert!(files_in(tmp.path()).is_empty());
}

#[test]
fn domain_errors_exit_with_code_1() {
    let tmp = TempDir::new().unwrap();
    let out = orsim(&["run", "--case", "no/such/case", "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("IoError"));

    let bad = tmp.path().join("bad.json");
    fs::write(&bad, "{\"format_version\":\"1.0\"}").unwrap();
    let out = orsim(&["run", "--case", s(&bad), "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(files_in(tmp.path()) == ["bad.json"]);
}

#[test]
fn failed_commands_remove_partial_output() {
    let tmp = TempDir::new().unwrap();
    // The report path is taken by a directory, so the second write fails
    // after the transcript was written.
    let dir = tmp.path().join("run");
    fs::create_dir_all(dir.join("case01-s7.report.json")).unwrap();
    let out = orsim(&["run", "--case", "fixtures/case01", "--seed", "7", "--out", s(&dir)]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(files_in(&dir), ["case01-s7.report.json"]);

    // A batch whose fourth item cannot be written leaves none behind, and
    // the output directory it created is gone.
    let batch = tmp.path().join("new/batch");
    let out = orsim(&["batch", "--n", "0", "--out", s(&batch)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!tmp.path().join("new").exists());
    fs::create_dir_all(batch.join("batch-0-00003.report.json")).unwrap();
    let out = orsim(&["batch", "--n", "8", "--jobs", "1", "--out", s(&batch)]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(files_in(&batch), ["batch-0-00003.report.json"]);
}

#[test]
fn batch_reports_parse_with_unique_sim_ids() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("b");
    ok(&["batch", "--corpus", "synthetic10", "--n", "40", "--seed", "5", "--jobs", "3", "--out", s(&dir)]);
    let names = files_in(&dir);
    assert_eq!(names.len(), 40);
    let mut ids: Vec<String> = names
        .iter()
        .map(|n| read_simulated_report(&dir.join(n)).unwrap().sim_id)
        .collect();
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), 40);

    // Items are independent of the job count.
    let one = tmp.path().join("one");
    ok(&["batch", "--corpus", "synthetic10", "--n", "40", "--seed", "5", "--jobs", "1", "--out", s(&one)]);
    for n in &names {
        assert_eq!(fs::read(dir.join(n)).unwrap(), fs::read(one.join(n)).unwrap(), "{n}");
    }
}

#[test]
fn gen_cases_is_deterministic_and_feeds_eval() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["gen-cases", "--n", "10", "--seed", "4", "--out", s(&a)]);
    ok(&["gen-cases", "--n", "10", "--seed", "4", "--out", s(&b)]);
    for f in ["manifest.json", "cases"] {
        assert!(a.join(f).exists());
    }
    for f in files_in(&a.join("cases")) {
        assert_eq!(fs::read(a.join("cases").join(&f)).unwrap(), fs::read(b.join("cases").join(&f)).unwrap());
    }
    assert_eq!(fs::read(a.join("manifest.json")).unwrap(), fs::read(b.join("manifest.json")).unwrap());
    assert_eq!(files_in(&a.join("cases")).len(), 10);

    let out = orsim(&["gen-cases", "--n", "10", "--out", s(&a)]);
    assert_eq!(out.status.code(), Some(2), "non-empty output directory");

    let e = tmp.path().join("e");
    ok(&["eval", "--corpus", s(&a), "--out", s(&e)]);
    let report = parse_eval_report(&fs::read_to_string(e.join("eval-full.json")).unwrap(), "x").unwrap();
    assert_eq!(report.n_cases, 10);

    // The manifest path works as well as its directory.
    ok(&["run", "--case", s(&a.join("cases").join(&files_in(&a.join("cases"))[0])), "--out", s(&e)]);
}

#[test]
fn ingested_banks_drive_retrieval() {
    let tmp = TempDir::new().unwrap();
    let mut banks = Vec::new();
    for role in ["anesthetist", "chief_surgeon", "nursing", "surgery_copilot"] {
        let path = tmp.path().join(format!("{role}.bank.json"));
        let stdout = ok(&[
            "ingest",
            "--docs",
            &format!("fixtures/knowledge/{role}"),
            "--bank-id",
            role,
            "--out",
            s(&path),
        ]);
        assert!(stdout.contains(&format!("bank `{role}`")), "{stdout}");
        banks.push(path);
    }
    // Banks built from the bundled documents with default chunking
    // reproduce the bundled library, so the run matches a default run.
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let mut args = vec!["run", "--case", "fixtures/case01", "--seed", "7", "--out", s(&a)];
    for p in &banks {
        args.extend(["--bank", s(p)]);
    }
    ok(&args);
    ok(&["run", "--case", "fixtures/case01", "--seed", "7", "--out", s(&b)]);
    let f = "case01-s7.report.json";
    assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());

    // A bank from a different embedder is rejected.
    let text = fs::read_to_string(&banks[0]).unwrap();
    let foreign = tmp.path().join("foreign.bank.json");
    fs::write(&foreign, text.replacen("hash-ngram-", "other-", 1)).unwrap();
    let out = orsim(&["run", "--case", "fixtures/case01", "--bank", s(&foreign), "--out", s(&a)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("EmbedderMismatch"), "{}", stderr(&out));

    let empty = tmp.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let out = orsim(&["ingest", "--docs", s(&empty), "--bank-id", "x", "--out", s(&tmp.path().join("x.json"))]);
    assert_eq!(out.status.code(), Some(1));
    let out = orsim(&[
        "ingest", "--docs", "fixtures/knowledge", "--bank-id", "x", "--chunk-size", "50", "--overlap", "50", "--out",
        s(&tmp.path().join("x.json")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("InvalidChunking"));
    assert!(!tmp.path().join("x.json").exists());
}

#[test]
fn compact_preserves_long_memory_records() {
    let tmp = TempDir::new().unwrap();
    let mem = tmp.path().join("memory.jsonl");
    for seed in ["1", "2", "3"] {
        ok(&["run", "--case", "fixtures/case01", "--seed", seed, "--memory", s(&mem), "--out", s(tmp.path())]);
    }
    let before = fs::read_to_string(&mem).unwrap();
    let records: Vec<&str> = before.lines().skip(1).filter(|l| !l.trim().is_empty()).collect();
    assert_eq!(records.len(), 3);
    let mut padded: String = before.lines().map(|l| format!("{l}\n\n")).collect();
    padded.push_str("\n\n");
    fs::write(&mem, padded).unwrap();

    let stdout = ok(&["compact", "--memory", s(&mem)]);
    assert!(stdout.starts_with("3 records"), "{stdout}");
    let after = fs::read_to_string(&mem).unwrap();
    assert_eq!(after, before);

    let out = orsim(&["compact", "--memory", s(&tmp.path().join("missing.jsonl"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn serve_answers_on_the_bound_port() {
    let mut child = Command::new(env!("CARGO_BIN_EXE_orsim"))
        .args(["serve", "--addr", "127.0.0.1:0", "--corpus", "synthetic5", "--token", "t0k"])
        .current_dir(root())
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on http://").expect("address line").to_string();

    let get = |path: &str, auth: bool| {
        let mut stream = TcpStream::connect(&addr).unwrap();
        let auth = if auth { "Authorization: Bearer t0k\r\n" } else { "" };
        write!(stream, "GET {path} HTTP/1.1\r\nHost: x\r\n{auth}Connection: close\r\n\r\n").unwrap();
        let mut resp = String::new();
        stream.read_to_string(&mut resp).unwrap();
        resp
    };
    assert!(get("/health", false).starts_with("HTTP/1.1 200"));
    assert!(get("/cases", false).starts_with("HTTP/1.1 401"));
    let cases = get("/cases", true);
    assert!(cases.starts_with("HTTP/1.1 200"), "{cases}");
    assert!(cases.contains("case_id"));
    child.kill().unwrap();
    child.wait().unwrap();
}
