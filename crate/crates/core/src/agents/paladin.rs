//! Retrieval-guided recovery: nearest exemplar script, then escalation.

use super::{
    failure_report, fill_slots, progress, recovery_move, AgentAction, AgentError, AgentPolicy, DecisionContext,
};
use crate::bank::{expand_script, DialogueTurn, RecoveryAction, RecoveryExemplar, SwitchStrategy};
use crate::taxonomy::ErrorSignature;

const GENERIC_REPORT: &str =
    "Recovery failed: {tool} kept returning {kind} ({message}). Stopping and reporting the failure.";

/// Executes the nearest exemplar's script move by move. When the script runs
/// out it switches to an untried same-capability tool (if the script made any
/// recovery attempt), otherwise it terminates with the script's report.
/// Without a bank it falls back to a generic retry-then-switch chain.
#[derive(Debug, Clone, Default)]
pub struct PaladinPolicy {
    /// Take thoughts from exemplar dialogue templates when present.
    pub use_dialogue_templates: bool,
}

impl PaladinPolicy {
    pub fn teacher() -> Self {
        PaladinPolicy { use_dialogue_templates: true }
    }

    /// Script used when no bank is available.
    pub fn generic_script() -> Vec<RecoveryAction> {
        vec![
            RecoveryAction::backoff(2, true),
            RecoveryAction::SwitchTool { strategy: SwitchStrategy::Alternative },
            RecoveryAction::terminate(GENERIC_REPORT),
        ]
    }

    fn template_thought(
        &self,
        exemplar: Option<&RecoveryExemplar>,
        index: usize,
        sig: &ErrorSignature,
    ) -> Option<String> {
        if !self.use_dialogue_templates {
            return None;
        }
        let turns: Vec<&DialogueTurn> =
            exemplar?.dialogue_template.as_ref()?.iter().filter(|t| t.from.eq_ignore_ascii_case("assistant")).collect();
        let turn = turns.get(index).or(turns.last())?;
        Some(template_to_thought(&fill_slots(&turn.value, sig)))
    }
}

/// Flattens a dialogue-template value into a single grammar-safe thought.
fn template_to_thought(value: &str) -> String {
    let body = value.trim().strip_prefix("Thoughts:").unwrap_or(value.trim());
    body.replace("Action:", "Plan:").split_whitespace().collect::<Vec<_>>().join(" ")
}

impl AgentPolicy for PaladinPolicy {
    fn name(&self) -> &str {
        "paladin"
    }

    fn decide(&self, ctx: &DecisionContext<'_>) -> Result<AgentAction, AgentError> {
        let Some(incident) = ctx.open_incident() else {
            return Ok(progress(ctx));
        };
        let sig = incident.first_signature();
        let exemplar = ctx.bank.and_then(|b| b.retrieve(sig));
        let script = exemplar.map(|e| e.script.clone()).unwrap_or_else(Self::generic_script);
        let has_alt = ctx.has_alternative(incident);
        let moves: Vec<RecoveryAction> = expand_script(&script)
            .into_iter()
            .filter(|a| !a.is_terminal())
            .filter(|a| has_alt || !matches!(a, RecoveryAction::SwitchTool { .. }))
            .collect();

        let index = incident.attempts();
        if let Some(action) = moves.get(index) {
            let switch_blocked =
                matches!(action, RecoveryAction::SwitchTool { .. }) && ctx.untried_alternative(incident).is_none();
            if !switch_blocked {
                let thought = self.template_thought(exemplar, index, sig);
                return Ok(recovery_move(ctx, incident, action.clone(), thought));
            }
        }
        if !moves.is_empty() && ctx.untried_alternative(incident).is_some() {
            let action = RecoveryAction::SwitchTool { strategy: SwitchStrategy::Alternative };
            return Ok(recovery_move(ctx, incident, action, None));
        }

        let last = incident.last_signature();
        let report = match script.last() {
            Some(RecoveryAction::TerminateGracefully { report }) => fill_slots(report, last),
            _ => failure_report(last),
        };
        let thought = self.template_thought(exemplar, index, last);
        Ok(recovery_move(ctx, incident, RecoveryAction::TerminateGracefully { report }, thought))
    }
}
