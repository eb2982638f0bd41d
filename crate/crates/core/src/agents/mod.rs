//! Agent policies: the interface the simulator drives, four scripted
//! baselines, the retrieval-guided policy and a remote chat adapter.

mod baselines;
mod paladin;
mod remote;

use serde_json::Value;
use thiserror::Error;

use crate::bank::{ExemplarBank, RecoveryAction, SwitchStrategy, ValidationCheck};
use crate::sim::analysis::{Analysis, Incident};
use crate::sim::{ToolRegistry, ToolSpec, Trajectory};
use crate::taxonomy::ErrorSignature;

pub use baselines::{consults_oracle, CriticPolicy, ReflectPolicy, VanillaPolicy, CRITIC_ORACLE_P};
pub use paladin::PaladinPolicy;
pub use remote::{infer_recovery_action, RemoteChatPolicy};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToolInvocation {
    pub name: String,
    pub args: Value,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AgentAction {
    ToolCall {
        name: String,
        args: Value,
        thought: String,
    },
    /// Serialized with the `Recovery:` prefix. `call` defaults to re-issuing
    /// the previous call; it is ignored for `TerminateGracefully`.
    RecoveryStep {
        action: RecoveryAction,
        thought: String,
        call: Option<ToolInvocation>,
    },
    Finish {
        answer: String,
        thought: String,
    },
    GiveUp {
        report: String,
        thought: String,
    },
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum AgentError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("agent output does not follow the action grammar")]
    Protocol { raw: String },
}

/// Everything a policy may look at when choosing its next action.
pub struct DecisionContext<'a> {
    pub trajectory: &'a Trajectory,
    pub analysis: &'a Analysis,
    pub last_error: Option<&'a ErrorSignature>,
    pub tools: &'a ToolRegistry,
    pub bank: Option<&'a ExemplarBank>,
    pub seed: u64,
    pub retry_budget: u32,
}

impl DecisionContext<'_> {
    /// The incident to react to: present iff the latest call failed.
    pub fn open_incident(&self) -> Option<&Incident> {
        self.analysis.open_incident()
    }

    /// Tool of the most recent call in `incident`.
    pub fn current_tool(&self, incident: &Incident) -> &str {
        &self.analysis.calls[*incident.calls.last().expect("non-empty incident")].tool
    }

    /// A same-capability tool not yet tried in `incident`.
    pub fn untried_alternative(&self, incident: &Incident) -> Option<&ToolSpec> {
        let first = &self.analysis.calls[incident.calls[0]].tool;
        let tried = incident.tools_tried(&self.analysis.calls);
        self.tools.alternatives(first).into_iter().find(|t| !tried.contains(t.name.as_str()))
    }

    pub fn has_alternative(&self, incident: &Incident) -> bool {
        let first = &self.analysis.calls[incident.calls[0]].tool;
        !self.tools.alternatives(first).is_empty()
    }
}

/// A policy mapping (context, error, seed) to the next action.
pub trait AgentPolicy: Send + Sync {
    fn name(&self) -> &str;
    fn decide(&self, ctx: &DecisionContext<'_>) -> Result<AgentAction, AgentError>;
}

/// Normal task progression: call the next step's tool, or finish.
pub fn progress(ctx: &DecisionContext<'_>) -> AgentAction {
    match ctx.analysis.next_step(ctx.tools).and_then(|s| ctx.tools.primary(s)) {
        Some(tool) => AgentAction::ToolCall {
            name: tool.name.clone(),
            args: tool.example_args(),
            thought: format!("I need the {} result, so I call {}.", step_label(tool), tool.name),
        },
        None => AgentAction::Finish {
            answer: final_answer(ctx.analysis, ctx.tools),
            thought: "All steps returned data; I can answer.".into(),
        },
    }
}

fn step_label(tool: &ToolSpec) -> &str {
    tool.capability.as_deref().unwrap_or(&tool.name)
}

/// `Final answer: step: k=v, ...; step: ...` over completed steps.
pub fn final_answer(analysis: &Analysis, tools: &ToolRegistry) -> String {
    let parts: Vec<String> = tools
        .steps()
        .into_iter()
        .filter_map(|step| {
            let call = analysis.completed_output(step)?;
            Some(format!("{step}: {}", slot_summary(call.response.as_deref().unwrap_or_default())))
        })
        .collect();
    format!("Final answer: {}", parts.join("; "))
}

/// `k=v` pairs for the scalar top-level fields of a JSON object response.
pub fn slot_summary(response: &str) -> String {
    match serde_json::from_str::<Value>(response) {
        Ok(Value::Object(map)) => {
            map.iter().filter_map(|(k, v)| scalar_text(v).map(|s| format!("{k}={s}"))).collect::<Vec<_>>().join(", ")
        }
        _ => response.trim().to_string(),
    }
}

pub fn scalar_text(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

/// Fills `{tool}`, `{kind}` and `{message}` slots.
pub fn fill_slots(template: &str, sig: &ErrorSignature) -> String {
    template.replace("{tool}", &sig.tool_name).replace("{kind}", &sig.kind).replace("{message}", sig.message.trim())
}

/// Honest failure report used by the baselines when they stop.
pub fn failure_report(sig: &ErrorSignature) -> String {
    let message = if sig.message.trim().is_empty() { "no response body" } else { sig.message.trim() };
    format!("The task failed: {} returned {} ({message}).", sig.tool_name, sig.kind)
}

/// Default first-person explanation of a recovery move.
pub fn recovery_thought(action: &RecoveryAction, sig: &ErrorSignature, switch_to: Option<&str>) -> String {
    let cause = format!(
        "{} returned {} ({}).",
        sig.tool_name,
        sig.kind,
        if sig.message.trim().is_empty() { "empty response" } else { sig.message.trim() }
    );
    let lead = match action {
        RecoveryAction::RetryWithBackoff { respect_retry_after, base_delay_ms, .. } => {
            match (sig.retry_after_ms, respect_retry_after) {
                (Some(ms), true) => format!("Retrying with backoff after the Retry-After delay of {ms} ms."),
                _ if *base_delay_ms == 0 => "Retrying the same call immediately.".to_string(),
                _ => "Retrying with exponential backoff.".to_string(),
            }
        }
        RecoveryAction::WaitUntilHealthy { .. } => "Waiting until the service is healthy before re-issuing.".into(),
        RecoveryAction::ReformatArguments { hint } => format!("Rewriting the arguments to {hint}."),
        RecoveryAction::SwitchTool { strategy } => {
            let target = switch_to.unwrap_or("another tool");
            match strategy {
                SwitchStrategy::Alternative => {
                    format!("Switching to {target}, an alternative with the same capability.")
                }
                SwitchStrategy::Fallback => format!("Switching to the fallback {target}."),
            }
        }
        RecoveryAction::RefreshCredentials => "Refreshing the proxy credentials and re-issuing.".into(),
        RecoveryAction::ValidateAndReissue { check } => {
            let what = match check {
                ValidationCheck::Url => "url",
                ValidationCheck::Payload => "payload",
                ValidationCheck::Headers => "headers",
                ValidationCheck::Params => "params",
            };
            format!("Validating the request {what} and re-issuing.")
        }
        RecoveryAction::LenientParse => "Re-reading the response with a lenient parser.".into(),
        RecoveryAction::TerminateGracefully { .. } => "No safe recovery remains; stopping and reporting.".into(),
    };
    format!("{lead} {cause}")
}

/// Builds the action for one recovery move inside `incident`.
pub fn recovery_move(
    ctx: &DecisionContext<'_>,
    incident: &Incident,
    action: RecoveryAction,
    thought: Option<String>,
) -> AgentAction {
    let sig = incident.last_signature();
    let call = match &action {
        RecoveryAction::SwitchTool { .. } => {
            ctx.untried_alternative(incident).map(|t| ToolInvocation { name: t.name.clone(), args: t.example_args() })
        }
        _ => {
            let last = &ctx.analysis.calls[*incident.calls.last().expect("non-empty incident")];
            Some(ToolInvocation { name: last.tool.clone(), args: last.args.clone() })
        }
    };
    let thought = thought.unwrap_or_else(|| recovery_thought(&action, sig, call.as_ref().map(|c| c.name.as_str())));
    AgentAction::RecoveryStep { action, thought, call }
}

/// Agent names accepted by [`by_name`].
pub const AGENT_NAMES: [&str; 5] = ["vanilla", "toolbench", "reflect", "critic", "paladin"];

/// Constructs a scripted policy by name.
pub fn by_name(name: &str) -> Option<Box<dyn AgentPolicy>> {
    let policy: Box<dyn AgentPolicy> = match name {
        "vanilla" => Box::new(VanillaPolicy::vanilla()),
        "toolbench" => Box::new(VanillaPolicy::toolbench()),
        "reflect" => Box::new(ReflectPolicy::default()),
        "critic" => Box::new(CriticPolicy::default()),
        "paladin" => Box::new(PaladinPolicy::default()),
        _ => return None,
    };
    Some(policy)
}
