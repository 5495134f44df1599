//! Plain-text renderings of eval reports, laid out like the usual
//! comparison tables: overall accuracy, stage checkpoints, ablations and
//! failure analysis.

use super::{AblationFlags, EvalReport, FailureKind};

fn row(cells: &[String]) -> String {
    format!("| {} |\n", cells.join(" | "))
}

fn rule(n: usize) -> String {
    format!("|{}\n", "---|".repeat(n))
}

/// Route and plan accuracy, one row per labelled report.
pub fn render_accuracy_table(rows: &[(&str, &EvalReport)]) -> String {
    let mut s = row(&["Method".into(), "Surgical Route".into(), "Surgical Plan".into()]);
    s.push_str(&rule(3));
    for (label, r) in rows {
        s.push_str(&row(&[
            label.to_string(),
            format!("{:.2}", r.route_accuracy),
            format!("{:.2}", r.plan_accuracy),
        ]));
    }
    s
}

/// Completeness and accuracy per checkpoint.
pub fn render_checkpoint_table(rows: &[(&str, &EvalReport)]) -> String {
    let Some((_, first)) = rows.first() else {
        return String::new();
    };
    let mut header = vec!["Method".to_string()];
    for (i, c) in first.checkpoints.iter().enumerate() {
        let pct = (c.fraction * 100.0).round() as u32;
        header.push(format!("Stage-{}({pct}%) Comp", i + 1));
        header.push(format!("Stage-{}({pct}%) Acc", i + 1));
    }
    let mut s = row(&header);
    s.push_str(&rule(header.len()));
    for (label, r) in rows {
        let mut cells = vec![label.to_string()];
        for c in &r.checkpoints {
            cells.push(format!("{:.2}", c.completeness));
            cells.push(format!("{:.2}", c.accuracy));
        }
        s.push_str(&row(&cells));
    }
    s
}

fn mark(on: bool) -> String {
    if on { "✓".into() } else { "✗".into() }
}

fn flag_cells(f: &AblationFlags) -> Vec<String> {
    vec![mark(f.copilot_on), mark(f.rag_on), mark(f.long_memory_on), mark(f.react_on)]
}

/// Ablation comparison: one row per report with its flag set.
pub fn render_ablation_table(rows: &[(&str, &EvalReport)]) -> String {
    let mut s = row(&[
        "Setting".into(),
        "Copilot".into(),
        "RAG".into(),
        "Long memory".into(),
        "ReAct".into(),
        "Surgical Route".into(),
        "Surgical Plan".into(),
        "Fingerprint".into(),
    ]);
    s.push_str(&rule(8));
    for (label, r) in rows {
        let mut cells = vec![label.to_string()];
        cells.extend(flag_cells(&r.flags));
        cells.push(format!("{:.2}", r.route_accuracy));
        cells.push(format!("{:.2}", r.plan_accuracy));
        cells.push(r.fingerprint[..12.min(r.fingerprint.len())].to_string());
        s.push_str(&row(&cells));
    }
    s
}

/// Failure counts by kind.
pub fn render_failure_table(report: &EvalReport) -> String {
    let mut s = row(&["Mistake".into(), "Count".into()]);
    s.push_str(&rule(2));
    for kind in FailureKind::ALL {
        let n = report.failure_counts.get(&kind).copied().unwrap_or(0);
        s.push_str(&row(&[kind.label().to_string(), n.to_string()]));
    }
    s
}

/// Route accuracy per disease.
pub fn render_disease_table(report: &EvalReport) -> String {
    let mut s = row(&["Disease".into(), "Cases".into(), "Surgical Route".into(), "Surgical Plan".into()]);
    s.push_str(&rule(4));
    for (code, d) in &report.per_disease {
        s.push_str(&row(&[
            code.clone(),
            d.n_cases.to_string(),
            format!("{:.2}", d.route_accuracy),
            format!("{:.2}", d.plan_accuracy),
        ]));
    }
    s
}

/// All tables for a single report.
pub fn render_report(label: &str, report: &EvalReport) -> String {
    let rows = [(label, report)];
    format!(
        "{}\n{}\n{}\n{}",
        render_accuracy_table(&rows),
        render_checkpoint_table(&rows),
        render_disease_table(report),
        render_failure_table(report)
    )
}
