//! Episode simulator: scripted tools, deterministic fault injection, a
//! simulated clock and retry budgets.

pub mod analysis;
pub mod clock;
pub mod grammar;
pub mod render;
pub mod trajectory;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::agents::{infer_recovery_action, AgentAction, AgentError, AgentPolicy, DecisionContext, ToolInvocation};
use crate::bank::{ExemplarBank, RecoveryAction, ValidationCheck};
use crate::seed;
use crate::taxonomy::{Catalog, ErrorClass, ErrorSignature, FailureKind, Manifestation};

use analysis::{analyze, Analysis};
use clock::{backoff_delay, BackoffPolicy};
use grammar::{parse_assistant, render_call, render_finish, render_give_up, ParsedAction};
pub use trajectory::{Role, Terminal, Trajectory, Turn, RECOVERY_PREFIX};

/// Body returned for calls whose arguments have no scripted response.
pub const UNSCRIPTED_RESPONSE: &str = r#"{"error": "No scripted response for these arguments", "status": 400}"#;

/// Hint returned after the first unparsable assistant turn.
pub const PROTOCOL_NOTE: &str =
    "Could not parse the last message. Reply with Thought:, Action: and Action Input: lines.";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SimError {
    #[error("tool registry is empty")]
    EmptyRegistry,
    #[error("duplicate tool name `{0}`")]
    DuplicateTool(String),
    #[error("invalid injection plan: {0}")]
    InvalidPlan(String),
    #[error("invalid simulator config: {0}")]
    InvalidConfig(String),
    #[error("trajectory prefix cannot be resumed: {0}")]
    BadPrefix(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamType {
    String,
    Number,
    Boolean,
    Object,
    Array,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    #[serde(rename = "type")]
    pub param_type: ParamType,
    #[serde(default)]
    pub required: bool,
    /// Value a well-behaved agent passes for this parameter.
    pub example: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub name: String,
    pub description: String,
    /// Tools sharing a capability are interchangeable for a task step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capability: Option<String>,
    #[serde(default)]
    pub parameters: Vec<ParamSpec>,
    /// Canonical argument JSON → response text.
    #[serde(default)]
    pub scripted_responses: BTreeMap<String, String>,
}

impl ToolSpec {
    pub fn new(name: &str, description: &str) -> Self {
        ToolSpec {
            name: name.to_string(),
            description: description.to_string(),
            capability: None,
            parameters: Vec::new(),
            scripted_responses: BTreeMap::new(),
        }
    }

    pub fn with_capability(mut self, capability: &str) -> Self {
        self.capability = Some(capability.to_string());
        self
    }

    pub fn with_param(mut self, name: &str, param_type: ParamType, example: Value) -> Self {
        self.parameters.push(ParamSpec { name: name.to_string(), param_type, required: true, example });
        self
    }

    pub fn with_response(mut self, args: &Value, response: &str) -> Self {
        self.scripted_responses.insert(canonical_args(args), response.to_string());
        self
    }

    /// Arguments built from the required parameters' examples.
    pub fn example_args(&self) -> Value {
        let map = self.parameters.iter().filter(|p| p.required).map(|p| (p.name.clone(), p.example.clone())).collect();
        Value::Object(map)
    }

    pub fn response_for(&self, args: &Value) -> Option<&str> {
        self.scripted_responses.get(&canonical_args(args)).map(String::as_str)
    }
}

/// Sorted-key compact JSON with whitespace runs inside strings collapsed.
pub fn canonical_args(args: &Value) -> String {
    fn normalize(v: &Value) -> Value {
        match v {
            Value::String(s) => Value::String(s.split_whitespace().collect::<Vec<_>>().join(" ")),
            Value::Array(items) => Value::Array(items.iter().map(normalize).collect()),
            Value::Object(map) => {
                Value::Object(map.iter().map(|(k, v)| (k.trim().to_string(), normalize(v))).collect())
            }
            other => other.clone(),
        }
    }
    normalize(args).to_string()
}

/// Canonical call key: tool name plus canonical arguments.
pub fn call_key(tool: &str, args: &Value) -> String {
    format!("{tool}:{}", canonical_args(args))
}

/// Ordered set of tools available in an episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ToolSpec>", into = "Vec<ToolSpec>")]
pub struct ToolRegistry {
    tools: Vec<ToolSpec>,
}

impl TryFrom<Vec<ToolSpec>> for ToolRegistry {
    type Error = SimError;

    fn try_from(tools: Vec<ToolSpec>) -> Result<Self, SimError> {
        ToolRegistry::new(tools)
    }
}

impl From<ToolRegistry> for Vec<ToolSpec> {
    fn from(registry: ToolRegistry) -> Self {
        registry.tools
    }
}

impl ToolRegistry {
    pub fn new(tools: Vec<ToolSpec>) -> Result<Self, SimError> {
        let mut seen = std::collections::BTreeSet::new();
        for tool in &tools {
            if !seen.insert(tool.name.as_str()) {
                return Err(SimError::DuplicateTool(tool.name.clone()));
            }
        }
        Ok(ToolRegistry { tools })
    }

    pub fn tools(&self) -> &[ToolSpec] {
        &self.tools
    }

    pub fn is_empty(&self) -> bool {
        self.tools.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&ToolSpec> {
        self.tools.iter().find(|t| t.name == name)
    }

    /// Task step served by `name`: its capability, or the name itself.
    pub fn step_of(&self, name: &str) -> String {
        self.get(name).and_then(|t| t.capability.clone()).unwrap_or_else(|| name.to_string())
    }

    /// Capabilities in order of first appearance; these are the task steps.
    pub fn steps(&self) -> Vec<&str> {
        let mut steps: Vec<&str> = Vec::new();
        for tool in &self.tools {
            if let Some(cap) = tool.capability.as_deref() {
                if !steps.contains(&cap) {
                    steps.push(cap);
                }
            }
        }
        steps
    }

    pub fn primary(&self, step: &str) -> Option<&ToolSpec> {
        self.tools.iter().find(|t| t.capability.as_deref() == Some(step))
    }

    /// Other tools offering the capability of `name`.
    pub fn alternatives(&self, name: &str) -> Vec<&ToolSpec> {
        let Some(cap) = self.get(name).and_then(|t| t.capability.as_deref()) else {
            return Vec::new();
        };
        self.tools.iter().filter(|t| t.name != name && t.capability.as_deref() == Some(cap)).collect()
    }
}

fn one() -> u32 {
    1
}

/// Second fault of a multi-fault plan.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cascade {
    pub kind: String,
    pub turn_index: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifestation: Option<Manifestation>,
}

/// Deterministic recipe for one episode's failure. `kind: None` is a clean
/// episode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectionPlan {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    /// Defaults to the kind's catalog manifestation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifestation: Option<Manifestation>,
    /// 1-based index of the tool call that fails.
    #[serde(default = "one")]
    pub turn_index: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cascade: Option<Cascade>,
    #[serde(default)]
    pub seed: u64,
    /// Number of consecutive failing calls before a plain re-issue can succeed.
    #[serde(default = "one")]
    pub persistence: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retry_after_ms: Option<u64>,
}

impl InjectionPlan {
    pub fn clean(seed: u64) -> Self {
        InjectionPlan {
            kind: None,
            manifestation: None,
            turn_index: 1,
            cascade: None,
            seed,
            persistence: 1,
            retry_after_ms: None,
        }
    }

    pub fn single(kind: &str, turn_index: u32, seed: u64) -> Self {
        InjectionPlan { kind: Some(kind.to_string()), turn_index, ..InjectionPlan::clean(seed) }
    }

    pub fn is_clean(&self) -> bool {
        self.kind.is_none()
    }

    pub fn validate(&self, config: &SimConfig) -> Result<(), SimError> {
        let catalog = Catalog::shipped();
        if self.turn_index < 1 || self.turn_index > config.max_steps {
            return Err(SimError::InvalidPlan(format!(
                "turn_index {} outside 1..={}",
                self.turn_index, config.max_steps
            )));
        }
        if self.persistence < 1 {
            return Err(SimError::InvalidPlan("persistence must be at least 1".into()));
        }
        if let Some(kind) = &self.kind {
            if catalog.get(kind).is_none() {
                return Err(SimError::InvalidPlan(format!("unknown failure kind `{kind}`")));
            }
        }
        if let Some(c) = &self.cascade {
            if self.kind.is_none() {
                return Err(SimError::InvalidPlan("cascade without a primary fault".into()));
            }
            if c.turn_index <= self.turn_index {
                return Err(SimError::InvalidPlan("cascade turn must follow the primary turn".into()));
            }
            if catalog.get(&c.kind).is_none() {
                return Err(SimError::InvalidPlan(format!("unknown cascade kind `{}`", c.kind)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockMode {
    #[default]
    Simulated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimConfig {
    pub max_steps: u32,
    pub retry_budget_per_error: u32,
    #[serde(default)]
    pub clock_mode: ClockMode,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default = "default_turn_cost")]
    pub turn_cost_ms: u64,
}

fn default_turn_cost() -> u64 {
    100
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            max_steps: 20,
            retry_budget_per_error: 3,
            clock_mode: ClockMode::Simulated,
            rng_seed: 0,
            turn_cost_ms: default_turn_cost(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.max_steps < 3 {
            return Err(SimError::InvalidConfig("max_steps must be at least 3".into()));
        }
        if !(1..=4).contains(&self.retry_budget_per_error) {
            return Err(SimError::InvalidConfig("retry_budget_per_error must be in 1..=4".into()));
        }
        Ok(())
    }
}

/// Everything needed to run one episode.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeSetup<'a> {
    pub episode_id: &'a str,
    pub prompt: &'a str,
    pub tools: &'a ToolRegistry,
    pub plan: &'a InjectionPlan,
    pub config: &'a SimConfig,
    pub bank: Option<&'a ExemplarBank>,
}

impl EpisodeSetup<'_> {
    fn validate(&self) -> Result<(), SimError> {
        if self.tools.is_empty() {
            return Err(SimError::EmptyRegistry);
        }
        self.config.validate()?;
        self.plan.validate(self.config)
    }

    /// Seed handed to the policy for this episode.
    pub fn agent_seed(&self) -> u64 {
        seed::mix(self.config.rng_seed, self.plan.seed)
    }
}

pub fn system_prompt(tools: &ToolRegistry) -> String {
    let mut text = String::from(
        "You are a tool-using assistant. Answer with `Thought:`, `Action:` and `Action Input:` lines; \
         use the Finish action to return the final answer. Available tools:",
    );
    for tool in tools.tools() {
        let params: Vec<&str> = tool.parameters.iter().map(|p| p.name.as_str()).collect();
        text.push_str(&format!("\n- {}({}): {}", tool.name, params.join(", "), tool.description));
    }
    text
}

/// Runs a fresh episode to completion.
pub fn run_episode(setup: EpisodeSetup<'_>, agent: &dyn AgentPolicy) -> Result<Trajectory, SimError> {
    setup.validate()?;
    let mut engine = Engine::new(setup);
    engine.push(Role::System, system_prompt(setup.tools), 0);
    engine.push(Role::User, setup.prompt.to_string(), 0);
    Ok(engine.drive(agent))
}

/// Replays `prefix` to rebuild simulator state, then lets `agent` continue.
/// Turns of the prefix are kept byte for byte.
pub fn resume_episode(
    setup: EpisodeSetup<'_>,
    prefix: &Trajectory,
    agent: &dyn AgentPolicy,
) -> Result<Trajectory, SimError> {
    setup.validate()?;
    let mut engine = Engine::new(setup);
    engine.replay(prefix)?;
    Ok(engine.drive(agent))
}

#[derive(Debug, Clone)]
struct ActiveFault {
    step: String,
    tool: String,
    kind: FailureKind,
    manifestation: Manifestation,
    persistence_left: u32,
    blocked_until: u64,
    retry_after_ms: Option<u64>,
    resolved: bool,
}

struct Engine<'a> {
    setup: EpisodeSetup<'a>,
    traj: Trajectory,
    calls: u32,
    faults: Vec<ActiveFault>,
    protocol_errors: u32,
}

impl<'a> Engine<'a> {
    fn new(setup: EpisodeSetup<'a>) -> Self {
        Engine {
            setup,
            traj: Trajectory::new(setup.episode_id, setup.plan.clone()),
            calls: 0,
            faults: Vec::new(),
            protocol_errors: 0,
        }
    }

    fn push(&mut self, role: Role, content: String, at: u64) {
        self.traj.turns.push(Turn::new(role, content, at));
    }

    fn drive(mut self, agent: &dyn AgentPolicy) -> Trajectory {
        let terminal = loop {
            if self.traj.assistant_turns() >= self.setup.config.max_steps as usize {
                break Terminal::StepBudgetExhausted;
            }
            let analysis = analyze(&self.traj, self.setup.tools);
            let last_error = last_error(&self.traj, &analysis);
            let ctx = DecisionContext {
                trajectory: &self.traj,
                analysis: &analysis,
                last_error: last_error.as_ref(),
                tools: self.setup.tools,
                bank: self.setup.bank,
                seed: self.setup.agent_seed(),
                retry_budget: self.setup.config.retry_budget_per_error,
            };
            match agent.decide(&ctx) {
                Err(AgentError::Transport(msg)) => {
                    break Terminal::Abandoned { reason: format!("transport error: {msg}") }
                }
                Err(AgentError::Protocol { raw }) => self.protocol_turn(raw),
                Ok(action) => {
                    if let Some(terminal) = self.apply(action, &analysis) {
                        break terminal;
                    }
                }
            }
        };
        self.traj.terminal = Some(terminal);
        self.traj
    }

    fn turn_time(&self) -> u64 {
        self.traj.now_ms() + self.setup.config.turn_cost_ms
    }

    fn protocol_turn(&mut self, raw: String) {
        let at = self.turn_time();
        self.push(Role::Assistant, raw, at);
        self.protocol_errors += 1;
        let reply = if self.protocol_errors == 1 {
            json!({ "note": PROTOCOL_NOTE }).to_string()
        } else {
            Catalog::shipped()
                .get("agent_protocol_error")
                .map(|k| k.example_output.clone())
                .unwrap_or_else(|| json!({"error": "Agent action could not be parsed"}).to_string())
        };
        self.push(Role::Function, reply, at);
    }

    fn apply(&mut self, action: AgentAction, analysis: &Analysis) -> Option<Terminal> {
        let at = self.turn_time();
        match action {
            AgentAction::ToolCall { name, args, thought } => {
                let text = render_call(false, &thought, &name, &args);
                self.call(text, &name, &args, None, analysis)
            }
            AgentAction::RecoveryStep { action: RecoveryAction::TerminateGracefully { report }, thought, .. } => {
                self.push(Role::Assistant, render_give_up(true, &thought, &report), at);
                Some(Terminal::GracefulFailure { report })
            }
            AgentAction::RecoveryStep { action, thought, call } => {
                let target = call.or_else(|| {
                    analysis.last_call().map(|c| ToolInvocation { name: c.tool.clone(), args: c.args.clone() })
                });
                let Some(target) = target else {
                    return Some(Terminal::Abandoned { reason: "recovery step without a prior call".into() });
                };
                let text = render_call(true, &thought, &target.name, &target.args);
                self.call(text, &target.name, &target.args, Some(&action), analysis)
            }
            AgentAction::Finish { answer, thought } => {
                self.push(Role::Assistant, render_finish(false, &thought, &answer), at);
                Some(Terminal::Finished { answer })
            }
            AgentAction::GiveUp { report, thought } => {
                self.push(Role::Assistant, render_give_up(false, &thought, &report), at);
                Some(Terminal::GracefulFailure { report })
            }
        }
    }

    fn call(
        &mut self,
        text: String,
        name: &str,
        args: &Value,
        action: Option<&RecoveryAction>,
        analysis: &Analysis,
    ) -> Option<Terminal> {
        let key = call_key(name, args);
        let step = self.setup.tools.step_of(name);
        let incident = analysis.incidents.iter().rev().find(|i| i.step == step && !i.resolved);
        if let Some(inc) = incident {
            let used = inc.calls.iter().any(|&i| analysis.calls[i].key == key);
            if used && analysis.retries_of(inc, &key) >= self.setup.config.retry_budget_per_error as usize {
                return Some(Terminal::Abandoned { reason: format!("retry budget exhausted for {name}") });
            }
        }

        let at = self.turn_time();
        self.push(Role::Assistant, text, at);
        self.calls += 1;
        let delay = match action {
            Some(a @ RecoveryAction::RetryWithBackoff { .. }) => {
                let policy = BackoffPolicy::from_action(a).unwrap_or_default();
                let attempt = incident.map(|i| i.attempts() as u32 + 1).unwrap_or(1);
                let retry_after = incident.and_then(|i| i.last_signature().retry_after_ms);
                let seed = seed::mix(self.setup.plan.seed, u64::from(self.calls));
                backoff_delay(attempt, &policy, retry_after, seed)
            }
            Some(RecoveryAction::WaitUntilHealthy { poll_interval_ms, max_wait_ms }) => {
                self.wait(&step, at, *poll_interval_ms, *max_wait_ms)
            }
            _ => 0,
        };
        let exec_at = at + delay;
        let response = self.serve(name, args, action, exec_at);
        self.push(Role::Function, response, exec_at);
        None
    }

    fn wait(&mut self, step: &str, start: u64, poll: u64, max_wait: u64) -> u64 {
        let poll = poll.max(1);
        let Some(fault) = self.faults.iter_mut().find(|f| f.step == step && !f.resolved) else {
            return 0;
        };
        let mut waited = 0;
        while (fault.persistence_left > 0 || start + waited < fault.blocked_until) && waited + poll <= max_wait {
            waited += poll;
            fault.persistence_left = fault.persistence_left.saturating_sub(1);
        }
        waited
    }

    /// Produces the function-turn text for call number `self.calls`.
    fn serve(&mut self, name: &str, args: &Value, action: Option<&RecoveryAction>, now: u64) -> String {
        let catalog = Catalog::shipped();
        let Some(tool) = self.setup.tools.get(name) else {
            return catalog.get("tool_not_found").map(|k| k.example_output.clone()).unwrap_or_default();
        };
        let step = self.setup.tools.step_of(name);
        let normal = tool.response_for(args).unwrap_or(UNSCRIPTED_RESPONSE).to_string();
        let plan = self.setup.plan;
        let render_seed = seed::mix(plan.seed, u64::from(self.calls));
        let existing = self.faults.iter().position(|f| f.step == step && !f.resolved);

        let injection = match (&plan.kind, &plan.cascade) {
            (Some(kind), _) if self.calls == plan.turn_index => {
                Some((kind.clone(), plan.manifestation, plan.persistence, plan.retry_after_ms))
            }
            (Some(_), Some(c)) if self.calls == c.turn_index => Some((c.kind.clone(), c.manifestation, 1, None)),
            _ => None,
        };
        if let (Some((kind, manifestation, persistence, retry_after_ms)), None) = (injection, existing) {
            let Some(kind) = catalog.get(&kind).cloned() else {
                return normal;
            };
            let manifestation = manifestation.unwrap_or(kind.default_manifestation);
            let text = render::render_against(&kind, manifestation, &normal, render_seed, retry_after_ms);
            self.faults.push(ActiveFault {
                step,
                tool: name.to_string(),
                kind,
                manifestation,
                persistence_left: persistence - 1,
                blocked_until: now + retry_after_ms.unwrap_or(0),
                retry_after_ms,
                resolved: false,
            });
            return text;
        }

        let Some(idx) = existing else {
            return normal;
        };
        let fault = &mut self.faults[idx];
        if resolves(fault, name, action, now) {
            fault.resolved = true;
            return normal;
        }
        fault.persistence_left = fault.persistence_left.saturating_sub(1);
        if let Some(after) = fault.retry_after_ms {
            fault.blocked_until = now + after;
        }
        render::render_against(&fault.kind, fault.manifestation, &normal, render_seed, fault.retry_after_ms)
    }

    fn replay(&mut self, prefix: &Trajectory) -> Result<(), SimError> {
        let turns = &prefix.turns;
        if turns.len() < 2 || turns[0].role != Role::System || turns[1].role != Role::User {
            return Err(SimError::BadPrefix("must start with system and user turns".into()));
        }
        if prefix.terminal.is_some() {
            return Err(SimError::BadPrefix("prefix already has a terminal state".into()));
        }
        let mut i = 0;
        while i < turns.len() {
            let turn = &turns[i];
            self.traj.turns.push(turn.clone());
            if turn.role == Role::Assistant {
                match parse_assistant(&turn.content) {
                    Ok(parsed) => match parsed.action {
                        ParsedAction::Call { name, args } => {
                            let action = parsed.recovery.then(|| infer_recovery_action(&parsed.thought));
                            self.calls += 1;
                            let at = turns.get(i + 1).map(|t| t.simulated_time_ms).unwrap_or(turn.simulated_time_ms);
                            self.serve(&name, &args, action.as_ref(), at);
                        }
                        _ => return Err(SimError::BadPrefix(format!("turn {i} already terminates the episode"))),
                    },
                    Err(_) => self.protocol_errors += 1,
                }
            }
            i += 1;
        }
        Ok(())
    }
}

/// Whether a re-issued call clears `fault`.
fn resolves(fault: &ActiveFault, tool: &str, action: Option<&RecoveryAction>, now: u64) -> bool {
    use RecoveryAction as A;
    let class = fault.kind.error_class;
    let kind = fault.kind.identifier.as_str();
    if tool != fault.tool {
        return matches!(
            class,
            ErrorClass::ReentrantFailure | ErrorClass::ToolHallucination | ErrorClass::OutputHallucination
        ) || kind == "truncated_output";
    }
    let ready = fault.persistence_left == 0 && now >= fault.blocked_until;
    let validates = |check: ValidationCheck| matches!(action, Some(A::ValidateAndReissue { check: c }) if *c == check);
    match kind {
        "http_401" | "http_403" | "http_404" | "http_410" => false,
        "http_407" => matches!(action, Some(A::RefreshCredentials)),
        "tool_not_found" => matches!(action, Some(A::ValidateAndReissue { .. })),
        "schema_violation" => matches!(action, Some(A::LenientParse)),
        "malformed_json" => matches!(action, Some(A::LenientParse)) || ready,
        "null_field"
        | "pagination_incomplete"
        | "plan_contradiction"
        | "stale_reference"
        | "missing_prerequisite"
        | "agent_protocol_error" => validates(ValidationCheck::Params),
        "partial_batch" => validates(ValidationCheck::Payload),
        _ if class == ErrorClass::ArgumentHallucination => {
            matches!(action, Some(A::ReformatArguments { .. }))
                || validates(ValidationCheck::Payload)
                || validates(ValidationCheck::Params)
        }
        _ => ready,
    }
}

/// Failure shown in the most recent function turn, if any.
fn last_error(traj: &Trajectory, analysis: &Analysis) -> Option<ErrorSignature> {
    let last_fn = traj.turns.iter().rposition(|t| t.role == Role::Function)?;
    if let Some(call) = analysis.calls.iter().find(|c| c.function_turn == Some(last_fn)) {
        return call.failure.clone();
    }
    analysis.protocol_events.iter().find(|e| e.function_turn == Some(last_fn)).and_then(|e| e.failure.clone())
}
