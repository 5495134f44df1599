use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::domain::{ActionKind, RoleId};
use crate::knowledge::default_bank_for;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RolePersona {
    pub role: RoleId,
    pub persona_text: String,
    #[serde(default)]
    pub knowledge_bank_id: Option<String>,
    pub action_grammar: BTreeSet<ActionKind>,
}

impl RolePersona {
    pub fn default_for(role: RoleId) -> Self {
        RolePersona {
            role,
            persona_text: default_persona_text(role).to_string(),
            knowledge_bank_id: default_bank_for(role).map(str::to_string),
            action_grammar: default_grammar(role),
        }
    }
}

pub fn default_personas() -> BTreeMap<RoleId, RolePersona> {
    RoleId::ALL
        .into_iter()
        .map(|r| (r, RolePersona::default_for(r)))
        .collect()
}

pub fn default_grammar(role: RoleId) -> BTreeSet<ActionKind> {
    use ActionKind::*;
    let kinds: &[ActionKind] = match role {
        RoleId::Patient => &[NoOp, Monitor],
        RoleId::ChiefSurgeon => &[
            CompleteSubtask,
            SelectRoute,
            ProposePlan,
            RaiseAlert,
            Monitor,
            NoOp,
        ],
        RoleId::SurgeonAssistant
        | RoleId::ScrubNurse
        | RoleId::WardNurse
        | RoleId::RoomNurse => &[CompleteSubtask, RaiseAlert, Monitor, NoOp],
        RoleId::Anesthetist => &[CompleteSubtask, Administer, Monitor, RaiseAlert, NoOp],
        RoleId::SurgeryCopilot => &[SelectRoute, ProposePlan, RaiseAlert, Monitor, NoOp],
    };
    kinds.iter().copied().collect()
}

fn default_persona_text(role: RoleId) -> &'static str {
    match role {
        RoleId::Patient => {
            "You are the patient. You answer questions about how you feel, your history and \
             your worries in plain language. You never make clinical decisions."
        }
        RoleId::ChiefSurgeon => {
            "You are the chief neurosurgeon. You review the MRI and history, decide the \
             surgical route and plan, lead every operative step and direct the team. You \
             announce completed steps with an action directive."
        }
        RoleId::SurgeonAssistant => {
            "You are the surgeon assistant. You position the patient, provide exposure and \
             suction, and perform the opening and closing steps delegated to you."
        }
        RoleId::ScrubNurse => {
            "You are the scrub nurse. You prepare and count the instruments, keep the sterile \
             field intact and anticipate the instruments the surgeon needs next."
        }
        RoleId::WardNurse => {
            "You are the ward nurse. You verify identity and site, transfer the patient, and \
             monitor vital signs and comfort before and after surgery."
        }
        RoleId::RoomNurse => {
            "You are the circulating room nurse. You handle consent checks, equipment, \
             navigation setup and supplies outside the sterile field."
        }
        RoleId::Anesthetist => {
            "You are the anesthetist. You assess the airway, induce and maintain anesthesia, \
             monitor vital signs continuously and manage pain and emergence."
        }
        RoleId::SurgeryCopilot => {
            "You are the surgery copilot. You select the surgical route, draft the plan, \
             monitor every phase, alert the team to risks and cite your sources."
        }
    }
}
