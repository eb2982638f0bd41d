//! Read-only view of a trajectory: tool calls, their outcomes, and the
//! failure incidents they form. Shared by the simulator (budgets), the
//! policies (what to do next) and the grader (what happened).

use std::collections::{BTreeMap, BTreeSet};

use serde_json::Value;

use super::grammar::{parse_assistant, ParsedAction};
use super::trajectory::{Role, Trajectory};
use super::{call_key, ToolRegistry};
use crate::taxonomy::{classify_tool_output, ErrorSignature, FailureContext};

#[derive(Debug, Clone, PartialEq)]
pub struct CallRecord {
    /// 1-based position among all tool calls of the episode.
    pub call_no: u32,
    pub assistant_turn: usize,
    pub function_turn: Option<usize>,
    pub tool: String,
    pub args: Value,
    /// Tool name plus canonical arguments.
    pub key: String,
    pub step: String,
    pub recovery: bool,
    pub thought: String,
    pub response: Option<String>,
    pub failure: Option<ErrorSignature>,
}

impl CallRecord {
    pub fn succeeded(&self) -> bool {
        self.response.is_some() && self.failure.is_none()
    }
}

/// Consecutive failing calls on one task step, closed by the first
/// successful call on that step.
#[derive(Debug, Clone, PartialEq)]
pub struct Incident {
    pub step: String,
    /// Indices into [`Analysis::calls`], starting with the opening failure.
    pub calls: Vec<usize>,
    pub signatures: Vec<ErrorSignature>,
    pub resolved: bool,
}

impl Incident {
    pub fn first_signature(&self) -> &ErrorSignature {
        &self.signatures[0]
    }

    pub fn last_signature(&self) -> &ErrorSignature {
        self.signatures.last().expect("incident has a signature")
    }

    /// Calls made after the opening failure.
    pub fn attempts(&self) -> usize {
        self.calls.len() - 1
    }

    pub fn tools_tried<'a>(&self, calls: &'a [CallRecord]) -> BTreeSet<&'a str> {
        self.calls.iter().map(|&i| calls[i].tool.as_str()).collect()
    }

    /// Distinct failure kinds in order of first appearance.
    pub fn kinds(&self) -> Vec<&str> {
        let mut seen = Vec::new();
        for sig in &self.signatures {
            if !seen.contains(&sig.kind.as_str()) {
                seen.push(sig.kind.as_str());
            }
        }
        seen
    }
}

/// An assistant turn that did not follow the action grammar.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolEvent {
    pub assistant_turn: usize,
    pub function_turn: Option<usize>,
    pub failure: Option<ErrorSignature>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Analysis {
    pub calls: Vec<CallRecord>,
    pub incidents: Vec<Incident>,
    pub protocol_events: Vec<ProtocolEvent>,
    /// Step → index of its latest successful call.
    pub completed: BTreeMap<String, usize>,
    pub final_action: Option<ParsedAction>,
}

impl Analysis {
    pub fn last_call(&self) -> Option<&CallRecord> {
        self.calls.last()
    }

    /// The incident still waiting for a fix, if the latest call failed.
    pub fn open_incident(&self) -> Option<&Incident> {
        let last = self.calls.len().checked_sub(1)?;
        self.incidents.iter().rev().find(|inc| inc.calls.last() == Some(&last)).filter(|inc| !inc.resolved)
    }

    pub fn unresolved_incidents(&self) -> impl Iterator<Item = &Incident> {
        self.incidents.iter().filter(|inc| !inc.resolved)
    }

    /// How often `key` was re-issued inside `incident` after its first use.
    pub fn retries_of(&self, incident: &Incident, key: &str) -> usize {
        incident.calls.iter().filter(|&&i| self.calls[i].key == key).count().saturating_sub(1)
    }

    /// First task step without a successful call.
    pub fn next_step<'r>(&self, tools: &'r ToolRegistry) -> Option<&'r str> {
        tools.steps().into_iter().find(|s| !self.completed.contains_key(*s))
    }

    pub fn completed_output(&self, step: &str) -> Option<&CallRecord> {
        self.completed.get(step).map(|&i| &self.calls[i])
    }
}

pub fn analyze(trajectory: &Trajectory, tools: &ToolRegistry) -> Analysis {
    let mut out = Analysis::default();
    let turns = &trajectory.turns;
    let mut i = 0;
    while i < turns.len() {
        if turns[i].role != Role::Assistant {
            i += 1;
            continue;
        }
        let function_turn = (i + 1 < turns.len() && turns[i + 1].role == Role::Function).then_some(i + 1);
        match parse_assistant(&turns[i].content) {
            Ok(parsed) => match parsed.action {
                ParsedAction::Call { name, args } => {
                    let step = tools.step_of(&name);
                    let response = function_turn.map(|f| turns[f].content.clone());
                    let failure = match (function_turn, &response) {
                        (Some(f), Some(text)) => {
                            classify_tool_output(text, FailureContext { tool_name: &name, turn_index: f })
                        }
                        _ => None,
                    };
                    let idx = out.calls.len();
                    out.calls.push(CallRecord {
                        call_no: idx as u32 + 1,
                        assistant_turn: i,
                        function_turn,
                        key: call_key(&name, &args),
                        tool: name,
                        args,
                        step: step.clone(),
                        recovery: parsed.recovery,
                        thought: parsed.thought,
                        response,
                        failure: failure.clone(),
                    });
                    record_outcome(&mut out, idx, &step, failure, function_turn.is_some());
                }
                action => out.final_action = Some(action),
            },
            Err(_) => {
                let failure = function_turn.and_then(|f| {
                    classify_tool_output(&turns[f].content, FailureContext { tool_name: "", turn_index: f })
                });
                out.protocol_events.push(ProtocolEvent { assistant_turn: i, function_turn, failure });
            }
        }
        i += 1;
    }
    out
}

fn record_outcome(out: &mut Analysis, idx: usize, step: &str, failure: Option<ErrorSignature>, answered: bool) {
    let open = out.incidents.iter_mut().rev().find(|inc| inc.step == step).filter(|inc| !inc.resolved);
    match (failure, open) {
        (Some(sig), Some(inc)) => {
            inc.calls.push(idx);
            inc.signatures.push(sig);
        }
        (Some(sig), None) => out.incidents.push(Incident {
            step: step.to_string(),
            calls: vec![idx],
            signatures: vec![sig],
            resolved: false,
        }),
        (None, open) if answered => {
            if let Some(inc) = open {
                inc.calls.push(idx);
                inc.resolved = true;
            }
            out.completed.insert(step.to_string(), idx);
        }
        (None, _) => {}
    }
}
