use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::domain::{PhaseId, RoleId};

/// Who speaks in each phase, and in what order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnPolicy {
    pub rotations: BTreeMap<PhaseId, Vec<RoleId>>,
    /// The copilot speaks after every completed rotation.
    pub copilot_interleave: bool,
    /// Rotation turns allowed per phase before it is closed.
    pub phase_budget: u32,
}

impl Default for TurnPolicy {
    fn default() -> Self {
        use RoleId::*;
        let rotations = [
            (PhaseId::PatientTransfer, vec![WardNurse, RoomNurse, Patient, ChiefSurgeon]),
            (PhaseId::Anesthesia, vec![Anesthetist, Patient, Anesthetist, RoomNurse, ChiefSurgeon]),
            (PhaseId::Preparation, vec![ScrubNurse, SurgeonAssistant, RoomNurse, ChiefSurgeon]),
            (PhaseId::SurgicalOperation, vec![ChiefSurgeon, SurgeonAssistant, ScrubNurse, Anesthetist]),
            (PhaseId::PostoperativeCare, vec![Anesthetist, WardNurse, Patient, ChiefSurgeon]),
        ]
        .into_iter()
        .collect();
        TurnPolicy {
            rotations,
            copilot_interleave: true,
            phase_budget: 20,
        }
    }
}

impl TurnPolicy {
    pub fn rotation(&self, phase: PhaseId) -> &[RoleId] {
        self.rotations.get(&phase).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn validate(&self) -> Result<(), String> {
        for phase in PhaseId::ALL {
            let rot = self.rotation(phase);
            if rot.is_empty() {
                return Err(format!("rotation for {phase} is empty"));
            }
            if self.copilot_interleave && rot.contains(&RoleId::SurgeryCopilot) {
                return Err(format!(
                    "surgery_copilot is interleaved and may not appear in the {phase} rotation"
                ));
            }
        }
        if self.phase_budget == 0 {
            return Err("phase budget must be positive".into());
        }
        Ok(())
    }

    /// Roles the rotations call on, plus the copilot when it is interleaved.
    pub fn required_roles(&self, copilot_on: bool) -> BTreeSet<RoleId> {
        let mut roles: BTreeSet<RoleId> = self.rotations.values().flatten().copied().collect();
        if self.copilot_interleave && copilot_on {
            roles.insert(RoleId::SurgeryCopilot);
        }
        roles
    }
}
