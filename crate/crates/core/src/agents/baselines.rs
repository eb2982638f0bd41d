//! Scripted baselines: vanilla, ToolBench-style, reflect and critic.

use super::{
    failure_report, fill_slots, progress, recovery_move, AgentAction, AgentError, AgentPolicy, DecisionContext,
};
use crate::bank::{expand_script, RecoveryAction};
use crate::seed;
use crate::sim::analysis::Incident;

const VANILLA_SALT: u64 = 0x0076_616e_696c_6c61;
const CRITIC_SALT: u64 = 0x6372_6974_6963;

/// Oracle-access probability of the critic baseline.
pub const CRITIC_ORACLE_P: f64 = 0.7;

/// Whether the critic consults the exemplar bank for error event `event`.
pub fn consults_oracle(seed: u64, event: u64) -> bool {
    seed::unit_draw(seed::mix(seed ^ CRITIC_SALT, event)) < CRITIC_ORACLE_P
}

/// Identifier of an incident's opening failure, used to key per-error draws.
fn event_id(ctx: &DecisionContext<'_>, incident: &Incident) -> u64 {
    u64::from(ctx.analysis.calls[incident.calls[0]].call_no)
}

/// No recovery at all. With probability `hallucination_p` it claims success
/// after an error, otherwise it gives up.
#[derive(Debug, Clone)]
pub struct VanillaPolicy {
    pub name: &'static str,
    pub hallucination_p: f64,
}

impl VanillaPolicy {
    pub fn vanilla() -> Self {
        VanillaPolicy { name: "vanilla", hallucination_p: 0.5 }
    }

    /// Same as vanilla but never fabricates an answer.
    pub fn toolbench() -> Self {
        VanillaPolicy { name: "toolbench", hallucination_p: 0.0 }
    }

    /// Whether the draw for `event` under `seed` produces a hallucinated Finish.
    pub fn hallucinates(&self, seed: u64, event: u64) -> bool {
        seed::unit_draw(seed::mix(seed ^ VANILLA_SALT, event)) < self.hallucination_p
    }
}

impl AgentPolicy for VanillaPolicy {
    fn name(&self) -> &str {
        self.name
    }

    fn decide(&self, ctx: &DecisionContext<'_>) -> Result<AgentAction, AgentError> {
        let Some(incident) = ctx.open_incident() else {
            return Ok(progress(ctx));
        };
        if self.hallucinates(ctx.seed, event_id(ctx, incident)) {
            let mut answer = super::final_answer(ctx.analysis, ctx.tools);
            for step in ctx.tools.steps() {
                if !ctx.analysis.completed.contains_key(step) {
                    answer.push_str(&format!("; {step}: completed successfully"));
                }
            }
            return Ok(AgentAction::Finish { answer, thought: "The call went through; I can answer now.".into() });
        }
        Ok(AgentAction::GiveUp {
            report: failure_report(incident.last_signature()),
            thought: "The tool returned an error, so I stop here.".into(),
        })
    }
}

/// Error-agnostic self-correction: re-issues the failing call up to three
/// times, reformatting arguments on the third attempt, then gives up.
#[derive(Debug, Clone)]
pub struct ReflectPolicy {
    pub max_attempts: usize,
}

impl Default for ReflectPolicy {
    fn default() -> Self {
        ReflectPolicy { max_attempts: 3 }
    }
}

impl ReflectPolicy {
    fn react(&self, ctx: &DecisionContext<'_>, incident: &Incident) -> AgentAction {
        let budget = self.max_attempts.min(ctx.retry_budget as usize);
        let attempt = incident.attempts() + 1;
        if attempt > budget {
            return AgentAction::GiveUp {
                report: failure_report(incident.last_signature()),
                thought: format!("The call still fails after {budget} attempts; I give up."),
            };
        }
        let action = if attempt == budget {
            RecoveryAction::ReformatArguments { hint: "adjust the argument formats".into() }
        } else {
            RecoveryAction::RetryWithBackoff {
                max_attempts: 1,
                base_delay_ms: 0,
                cap_ms: 0,
                respect_retry_after: false,
            }
        };
        recovery_move(ctx, incident, action, None)
    }
}

impl AgentPolicy for ReflectPolicy {
    fn name(&self) -> &str {
        "reflect"
    }

    fn decide(&self, ctx: &DecisionContext<'_>) -> Result<AgentAction, AgentError> {
        match ctx.open_incident() {
            Some(incident) => Ok(self.react(ctx, incident)),
            None => Ok(progress(ctx)),
        }
    }
}

/// Consults the exemplar bank (top-3, best first) with probability
/// [`CRITIC_ORACLE_P`] per error; otherwise falls back to reflect.
#[derive(Debug, Clone)]
pub struct CriticPolicy {
    pub top_k: usize,
    pub max_attempts: usize,
    reflect: ReflectPolicy,
}

impl Default for CriticPolicy {
    fn default() -> Self {
        CriticPolicy { top_k: 3, max_attempts: 3, reflect: ReflectPolicy::default() }
    }
}

impl AgentPolicy for CriticPolicy {
    fn name(&self) -> &str {
        "critic"
    }

    fn decide(&self, ctx: &DecisionContext<'_>) -> Result<AgentAction, AgentError> {
        let Some(incident) = ctx.open_incident() else {
            return Ok(progress(ctx));
        };
        let bank = match ctx.bank {
            Some(bank) if consults_oracle(ctx.seed, event_id(ctx, incident)) => bank,
            _ => return Ok(self.reflect.react(ctx, incident)),
        };
        let sig = incident.first_signature();
        let ranked = bank.top_k(sig, self.top_k);
        let Some((best, _)) = ranked.first() else {
            return Ok(self.reflect.react(ctx, incident));
        };
        if best.script.iter().all(RecoveryAction::is_terminal) {
            let report = match best.script.last() {
                Some(RecoveryAction::TerminateGracefully { report }) => fill_slots(report, sig),
                _ => failure_report(sig),
            };
            return Ok(recovery_move(ctx, incident, RecoveryAction::TerminateGracefully { report }, None));
        }
        let has_alt = ctx.has_alternative(incident);
        let mut moves: Vec<RecoveryAction> = ranked
            .iter()
            .flat_map(|(e, _)| expand_script(&e.script))
            .filter(|a| !a.is_terminal())
            .filter(|a| has_alt || !matches!(a, RecoveryAction::SwitchTool { .. }))
            .collect();
        moves.truncate(self.max_attempts.min(ctx.retry_budget as usize));
        match moves.get(incident.attempts()) {
            Some(action)
                if !matches!(action, RecoveryAction::SwitchTool { .. })
                    || ctx.untried_alternative(incident).is_some() =>
            {
                Ok(recovery_move(ctx, incident, action.clone(), None))
            }
            _ => Ok(AgentAction::GiveUp {
                report: failure_report(incident.last_signature()),
                thought: "The retrieved strategies did not fix the call; I stop and report.".into(),
            }),
        }
    }
}
