//! Deterministic operating-room simulation sandbox.
//!
//! A case is played out by role agents over five perioperative phases.
//! A surgery copilot with short and long memory selects the route,
//! drafts the plan and guides each phase; the evaluation module scores
//! the resulting report against the case's gold annotations.

pub mod agent;
pub mod copilot;
pub mod domain;
pub mod eval;
pub mod fixtures;
pub mod knowledge;
pub mod records;
pub mod runner;
pub mod synth;
pub mod vocab;
pub mod workflow;
