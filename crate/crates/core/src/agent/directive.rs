//! Machine-readable action directives embedded in agent text.
//!
//! A directive sits on its own line: `[[ACTION: key=value]]`. The first
//! permitted, well-formed directive becomes the utterance's action.

use std::collections::BTreeSet;

use crate::domain::{canonicalize_route, Action, ActionKind, PlanStep, RoleId, SubtaskId};
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParsedAction {
    pub action: Option<Action>,
    pub warnings: Vec<String>,
}

const OPEN: &str = "[[ACTION:";
const CLOSE: &str = "]]";

/// Splits a line into `(key, value)` if it is a directive.
fn directive_parts(line: &str) -> Option<(String, String)> {
    let line = line.trim();
    let inner = line.strip_prefix(OPEN)?.strip_suffix(CLOSE)?.trim();
    let (key, value) = match inner.split_once('=') {
        Some((k, v)) => (k.trim(), v.trim()),
        None => (inner, ""),
    };
    Some((key.to_ascii_lowercase(), value.to_string()))
}

pub fn parse_action(
    role: RoleId,
    text: &str,
    grammar: &BTreeSet<ActionKind>,
    vocab: &Vocabulary,
) -> ParsedAction {
    let mut out = ParsedAction::default();
    for line in text.lines() {
        let Some((key, value)) = directive_parts(line) else {
            continue;
        };
        if out.action.is_some() {
            out.warnings
                .push(format!("extra directive `{key}` ignored; one action per utterance"));
            continue;
        }
        let Some(kind) = ActionKind::from_directive_key(&key) else {
            out.warnings.push(format!("unknown directive `{key}`"));
            out.action = Some(Action::NoOp);
            continue;
        };
        if !grammar.contains(&kind) {
            out.warnings
                .push(format!("{role} may not emit `{key}`; treated as no-op"));
            out.action = Some(Action::NoOp);
            continue;
        }
        match build_action(kind, &value, vocab) {
            Ok(a) => out.action = Some(a),
            Err(msg) => {
                out.warnings.push(format!("malformed `{key}` directive: {msg}"));
                out.action = Some(Action::NoOp);
            }
        }
    }
    out
}

fn build_action(kind: ActionKind, value: &str, vocab: &Vocabulary) -> Result<Action, String> {
    let need_value = || {
        if value.is_empty() {
            Err("missing value".to_string())
        } else {
            Ok(value.to_string())
        }
    };
    Ok(match kind {
        ActionKind::CompleteSubtask => Action::CompleteSubtask(SubtaskId(need_value()?)),
        ActionKind::SelectRoute => Action::SelectRoute(
            canonicalize_route(value, &vocab.route_aliases).map_err(|e| e.to_string())?,
        ),
        ActionKind::ProposePlan => {
            let mut steps: Vec<PlanStep> = Vec::new();
            for id in value.split(';').map(str::trim).filter(|s| !s.is_empty()) {
                let id = SubtaskId(id.to_string());
                if steps.iter().any(|s| s.step_id == id) {
                    return Err(format!("duplicate step `{id}`"));
                }
                let step = vocab
                    .taxonomy
                    .plan_step(&id)
                    .ok_or_else(|| format!("unknown step `{id}`"))?;
                steps.push(step);
            }
            if steps.is_empty() {
                return Err("empty plan".into());
            }
            Action::ProposePlan(steps)
        }
        ActionKind::RaiseAlert => Action::RaiseAlert(need_value()?),
        ActionKind::Administer => Action::Administer(need_value()?),
        ActionKind::Monitor => Action::Monitor(need_value()?),
        ActionKind::NoOp => Action::NoOp,
    })
}

/// Renders an action as its directive line.
pub fn render_directive(action: &Action) -> String {
    let key = action.kind().directive_key();
    let value = match action {
        Action::CompleteSubtask(id) => id.0.clone(),
        Action::SelectRoute(r) => r.as_str().to_string(),
        Action::ProposePlan(steps) => steps
            .iter()
            .map(|s| s.step_id.as_str())
            .collect::<Vec<_>>()
            .join(";"),
        Action::RaiseAlert(t) | Action::Administer(t) | Action::Monitor(t) => one_line(t),
        Action::NoOp => return format!("{OPEN} {key}{CLOSE}"),
    };
    format!("{OPEN} {key}={value}{CLOSE}")
}

fn one_line(s: &str) -> String {
    if s.contains('\n') {
        s.split_whitespace().collect::<Vec<_>>().join(" ")
    } else {
        s.trim().to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::persona::default_grammar;
    use crate::fixtures;

    #[test]
    fn chief_select_route_is_canonicalized() {
        let vocab = fixtures::vocabulary();
        let text = "Let's go endonasal.\n[[ACTION: select_route=Endoscopic Endonasal]]";
        let p = parse_action(
            RoleId::ChiefSurgeon,
            text,
            &default_grammar(RoleId::ChiefSurgeon),
            &vocab,
        );
        match p.action {
            Some(Action::SelectRoute(r)) => {
                assert_eq!(r.as_str(), "endoscopic endonasal transsphenoidal")
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(p.warnings.is_empty());
    }

    #[test]
    fn scrub_nurse_cannot_select_route() {
        let vocab = fixtures::vocabulary();
        let p = parse_action(
            RoleId::ScrubNurse,
            "[[ACTION: select_route=craniotomy]]",
            &default_grammar(RoleId::ScrubNurse),
            &vocab,
        );
        assert_eq!(p.action, Some(Action::NoOp));
        assert_eq!(p.warnings.len(), 1);
    }

    #[test]
    fn text_without_directive_has_no_action() {
        let vocab = fixtures::vocabulary();
        let p = parse_action(
            RoleId::WardNurse,
            "Patient is comfortable. [[ACTION: inline is not a directive",
            &default_grammar(RoleId::WardNurse),
            &vocab,
        );
        assert_eq!(p, ParsedAction::default());
    }

    #[test]
    fn unknown_plan_step_is_malformed() {
        let vocab = fixtures::vocabulary();
        let p = parse_action(
            RoleId::ChiefSurgeon,
            "[[ACTION: propose_plan=op.sphenoidotomy;op.teleport]]",
            &default_grammar(RoleId::ChiefSurgeon),
            &vocab,
        );
        assert_eq!(p.action, Some(Action::NoOp));
        assert!(p.warnings[0].contains("op.teleport"));
    }

    #[test]
    fn only_first_directive_counts() {
        let vocab = fixtures::vocabulary();
        let p = parse_action(
            RoleId::Anesthetist,
            "[[ACTION: administer=propofol 2 mg/kg]]\n[[ACTION: monitor=BIS 45]]",
            &default_grammar(RoleId::Anesthetist),
            &vocab,
        );
        assert_eq!(p.action, Some(Action::Administer("propofol 2 mg/kg".into())));
        assert_eq!(p.warnings.len(), 1);
    }
}
