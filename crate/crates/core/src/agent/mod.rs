//! Role agents: persona + context → prompt → backend → utterance.

pub mod backend;
pub mod directive;
pub mod persona;
pub mod prompt;

pub use backend::{
    BackendError, GenerationBackend, GenerationParams, GenerationRequest, Message, MessageTag,
    RuleTable, ScriptedBackend,
};
pub use directive::{parse_action, render_directive, ParsedAction};
pub use persona::{default_grammar, default_personas, RolePersona};
pub use prompt::{assemble_prompt, AgendaItem, PromptConfig, PromptContext, TurnView};

use crate::domain::{Origin, Speaker, Utterance};
use crate::vocab::Vocabulary;

/// A generated utterance plus any directive warnings raised while parsing.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentTurn {
    pub utterance: Utterance,
    pub warnings: Vec<String>,
}

/// Runs one generation for the context's role. `seq` is the transcript
/// position the utterance will occupy.
pub fn generate_utterance(
    persona: &RolePersona,
    ctx: &PromptContext,
    backend: &dyn GenerationBackend,
    vocab: &Vocabulary,
    seq: u64,
    seed: u64,
) -> Result<AgentTurn, BackendError> {
    let text = backend.generate(&ctx.request(seed))?;
    let parsed = parse_action(persona.role, &text, &persona.action_grammar, vocab);
    Ok(AgentTurn {
        utterance: Utterance {
            seq,
            tick: ctx.tick,
            phase: ctx.phase,
            speaker: Speaker::Role(persona.role),
            text,
            action: parsed.action,
            origin: Origin::Agent,
        },
        warnings: parsed.warnings,
    })
}
