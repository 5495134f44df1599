//! Corpus-supplied vocabularies: the per-phase subtask taxonomy and the
//! route alias table.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::domain::{
    contains_on_word_boundary, normalize_text, AliasTable, PhaseId, PlanStep, RoleId, RouteLabel,
    SubtaskId,
};

/// One entry of the subtask taxonomy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskDef {
    pub id: SubtaskId,
    pub description: String,
    /// Role responsible for completing the task.
    pub owner: RoleId,
    /// Canonical routes the task applies to; empty means every route.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub routes: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub aliases: Vec<String>,
    /// Contingency tasks only enter an agenda when an event adds them.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub contingency: bool,
}

impl TaskDef {
    pub fn applies_to(&self, route: Option<&RouteLabel>) -> bool {
        match route {
            _ if self.routes.is_empty() => true,
            None => false,
            Some(r) => self.routes.iter().any(|x| normalize_text(x) == r.as_str()),
        }
    }
}

/// Ordered task list per phase.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Taxonomy {
    pub phases: BTreeMap<PhaseId, Vec<TaskDef>>,
}

impl Taxonomy {
    pub fn tasks(&self, phase: PhaseId) -> &[TaskDef] {
        self.phases.get(&phase).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn get(&self, id: &SubtaskId) -> Option<(PhaseId, &TaskDef)> {
        self.phases
            .iter()
            .find_map(|(p, tasks)| tasks.iter().find(|t| &t.id == id).map(|t| (*p, t)))
    }

    pub fn phase_of(&self, id: &SubtaskId) -> Option<PhaseId> {
        self.get(id).map(|(p, _)| p)
    }

    /// Non-contingency tasks of a phase that apply to the route, in order.
    pub fn base_agenda(&self, phase: PhaseId, route: Option<&RouteLabel>) -> Vec<SubtaskId> {
        self.tasks(phase)
            .iter()
            .filter(|t| !t.contingency && t.applies_to(route))
            .map(|t| t.id.clone())
            .collect()
    }

    pub fn plan_step(&self, id: &SubtaskId) -> Option<PlanStep> {
        self.get(id).map(|(phase, t)| PlanStep {
            step_id: t.id.clone(),
            description: t.description.clone(),
            phase,
            canonical: true,
        })
    }

    /// Maps free text (one plan line) onto a step id. Explicit ids win;
    /// otherwise aliases and descriptions are matched longest-first.
    pub fn match_step(&self, text: &str) -> Option<SubtaskId> {
        let lowered = text.to_lowercase();
        let mut ids: Vec<&SubtaskId> = self.phases.values().flatten().map(|t| &t.id).collect();
        ids.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.cmp(b)));
        if let Some(id) = ids
            .into_iter()
            .find(|id| contains_on_word_boundary(&lowered, &id.0.to_lowercase()))
        {
            return Some(id.clone());
        }
        let normalized = normalize_text(&strip_punctuation(text));
        self.step_aliases()
            .resolve(&normalized)
            .map(|s| SubtaskId(s.to_string()))
    }

    /// Alias table mapping descriptions and aliases to step ids.
    pub fn step_aliases(&self) -> AliasTable {
        let mut t = AliasTable::new();
        for task in self.phases.values().flatten() {
            t.insert(&strip_punctuation(&task.description), task.id.as_str());
            for a in &task.aliases {
                t.insert(&strip_punctuation(a), task.id.as_str());
            }
        }
        t
    }
}

fn strip_punctuation(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect()
}

/// Everything a corpus configures about names.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    #[serde(default)]
    pub route_aliases: AliasTable,
    pub taxonomy: Taxonomy,
}
