//! Whole-episode drivers: one case, an evaluation pass over a corpus, and
//! seeded batches of simulated reports.
//!
//! Evaluation runs its cases one after another in case-id order so that
//! long memory accumulates the same way on every invocation.

use std::sync::Arc;

use crate::agent::backend::GenerationBackend;
use crate::agent::default_personas;
use crate::copilot::memory::LongMemoryStore;
use crate::domain::{EventTrigger, SurgicalCase};
use crate::eval::{aggregate_report, errored_case, evaluate_case, CaseResult, EvalConfig, EvalError, EvalReport};
use crate::fixtures;
use crate::knowledge::KnowledgeLibrary;
use crate::vocab::Vocabulary;
use crate::workflow::report::{SimulatedReport, TranscriptHeader};
use crate::workflow::{mix_seed, SimConfig, SimResources, SimSetup, Simulation, TurnPolicy, WorkflowError};

/// Upper bound on turns for one episode. The phase budgets end every
/// episode well before this.
pub const MAX_TURNS: usize = 5_000;

/// Everything except the case and the seed that a run needs.
#[derive(Clone)]
pub struct RunSpec {
    pub vocab: Arc<Vocabulary>,
    pub backend: Arc<dyn GenerationBackend>,
    pub library: Option<Arc<KnowledgeLibrary>>,
    pub triggers: Vec<EventTrigger>,
    pub policy: TurnPolicy,
    pub config: SimConfig,
}

impl std::fmt::Debug for RunSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RunSpec")
            .field("backend", &self.backend.id())
            .field("library", &self.library)
            .field("triggers", &self.triggers.len())
            .field("config", &self.config)
            .finish()
    }
}

impl RunSpec {
    /// Bundled vocabulary, rule table, triggers and knowledge.
    pub fn fixture(config: SimConfig) -> RunSpec {
        RunSpec {
            vocab: Arc::new(fixtures::vocabulary()),
            backend: Arc::new(fixtures::scripted_backend()),
            library: Some(Arc::new(fixtures::library())),
            triggers: fixtures::triggers(),
            policy: TurnPolicy::default(),
            config,
        }
    }

    pub fn with_config(&self, config: SimConfig) -> RunSpec {
        RunSpec {
            config,
            ..self.clone()
        }
    }

    pub fn setup(&self, seed: u64) -> SimSetup {
        SimSetup {
            personas: default_personas(),
            policy: self.policy.clone(),
            triggers: self.triggers.clone(),
            seed,
            config: self.config.clone(),
            sim_id: None,
        }
    }

    pub fn resources(&self, long_memory: Option<Arc<LongMemoryStore>>) -> SimResources {
        SimResources {
            vocab: self.vocab.clone(),
            backend: self.backend.clone(),
            library: self.library.clone(),
            long_memory,
        }
    }

    /// Long memory is attached only when the flags use it.
    fn memory_for(&self, store: Option<&Arc<LongMemoryStore>>) -> Option<Arc<LongMemoryStore>> {
        let flags = self.config.flags;
        (flags.copilot_on && flags.long_memory_on).then(|| store.cloned()).flatten()
    }

    pub fn create(
        &self,
        case: SurgicalCase,
        seed: u64,
        sim_id: Option<String>,
        long_memory: Option<&Arc<LongMemoryStore>>,
    ) -> Result<Simulation, WorkflowError> {
        let mut setup = self.setup(seed);
        setup.sim_id = sim_id;
        Simulation::new(case, setup, self.resources(self.memory_for(long_memory)))
    }

    /// Plays one case to the end and finalizes it. An episode that does
    /// not complete within [`MAX_TURNS`] is finalized as aborted.
    pub fn simulate(
        &self,
        case: &SurgicalCase,
        seed: u64,
        sim_id: Option<String>,
        long_memory: Option<&Arc<LongMemoryStore>>,
    ) -> Result<RunOutput, WorkflowError> {
        let mut sim = self.create(case.clone(), seed, sim_id, long_memory)?;
        sim.run_to_completion(MAX_TURNS)?;
        let report = sim.finalize(true)?;
        Ok(RunOutput {
            header: report.header(self.policy.phase_budget),
            record_id: sim.record_id().map(str::to_string),
            report,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub report: SimulatedReport,
    pub header: TranscriptHeader,
    pub record_id: Option<String>,
}

/// Seed of one case in an evaluation pass. Depends on the case id, not
/// its position, so reordering a corpus does not change any run.
pub fn case_seed(base_seed: u64, case_id: &str) -> u64 {
    let h = case_id
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3));
    mix_seed(base_seed, h)
}

#[derive(Debug, Clone)]
pub struct EvalRun {
    pub report: EvalReport,
    pub results: Vec<CaseResult>,
    pub reports: Vec<SimulatedReport>,
}

/// Simulates and scores every case. A case whose run errors is scored
/// zero and counted in `errored_cases`.
pub fn run_eval(
    spec: &RunSpec,
    cases: &[SurgicalCase],
    base_seed: u64,
    cfg: &EvalConfig,
    long_memory: Option<Arc<LongMemoryStore>>,
) -> Result<EvalRun, EvalError> {
    cfg.validate()?;
    if cases.is_empty() {
        return Err(EvalError::NoCases);
    }
    let store = long_memory.unwrap_or_else(|| Arc::new(LongMemoryStore::in_memory()));
    let mut ordered: Vec<&SurgicalCase> = cases.iter().collect();
    ordered.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    let mut results = Vec::with_capacity(cases.len());
    let mut reports = Vec::with_capacity(cases.len());
    for case in ordered {
        let seed = case_seed(base_seed, &case.case_id);
        match spec.simulate(case, seed, None, Some(&store)) {
            Ok(out) => {
                results.push(evaluate_case(&out.report, case, cfg)?);
                reports.push(out.report);
            }
            Err(e) => results.push(errored_case(case, cfg, format!("{}: {e}", e.code()))),
        }
    }
    let report = aggregate_report(&results, spec.config.flags, &spec.backend.id(), base_seed)?;
    Ok(EvalRun {
        report,
        results,
        reports,
    })
}

/// Batch item `i`: case `i mod |cases|` with its own seed and sim id.
/// Batches do not touch long memory, so items are independent and may
/// be produced in any order.
pub fn run_batch_item(spec: &RunSpec, cases: &[SurgicalCase], base_seed: u64, i: usize) -> Result<RunOutput, WorkflowError> {
    let case = &cases[i % cases.len()];
    let seed = mix_seed(base_seed, i as u64);
    spec.simulate(case, seed, Some(format!("batch-{base_seed}-{i:05}")), None)
}
