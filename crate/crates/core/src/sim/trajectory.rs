//! Trajectory types and their `.jsonl` wire shape.
//!
//! A serialized line carries the conversation as an array of
//! `{"role", "content": [{"type": "text", "text"}]}` objects plus a sidecar
//! `meta` object with the episode id, injection plan, terminal state and the
//! simulated timestamp of every turn.

use serde::{Deserialize, Serialize};

use super::InjectionPlan;

/// Literal prefix of corrective assistant turns.
pub const RECOVERY_PREFIX: &str = "Recovery:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
    Function,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Turn {
    pub role: Role,
    pub content: String,
    pub is_recovery: bool,
    pub simulated_time_ms: u64,
}

impl Turn {
    pub fn new(role: Role, content: impl Into<String>, simulated_time_ms: u64) -> Self {
        let content = content.into();
        let is_recovery = role == Role::Assistant && content.starts_with(RECOVERY_PREFIX);
        Turn { role, content, is_recovery, simulated_time_ms }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum Terminal {
    Finished { answer: String },
    GracefulFailure { report: String },
    Abandoned { reason: String },
    StepBudgetExhausted,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trajectory {
    pub episode_id: String,
    pub turns: Vec<Turn>,
    pub plan: InjectionPlan,
    pub terminal: Option<Terminal>,
}

#[derive(Debug, thiserror::Error)]
pub enum TraceFormatError {
    #[error("invalid trajectory json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("timings length {timings} does not match {turns} turns")]
    TimingMismatch { timings: usize, turns: usize },
}

#[derive(Serialize, Deserialize)]
struct TextPart {
    #[serde(rename = "type")]
    kind: String,
    text: String,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum Content {
    Parts(Vec<TextPart>),
    Plain(String),
}

#[derive(Serialize, Deserialize)]
struct Message {
    role: Role,
    content: Content,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    episode_id: String,
    plan: InjectionPlan,
    #[serde(default)]
    terminal: Option<Terminal>,
    #[serde(default)]
    timings: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
struct Line {
    conversation: Vec<Message>,
    meta: Meta,
}

impl Trajectory {
    pub fn new(episode_id: impl Into<String>, plan: InjectionPlan) -> Self {
        Trajectory { episode_id: episode_id.into(), turns: Vec::new(), plan, terminal: None }
    }

    pub fn now_ms(&self) -> u64 {
        self.turns.last().map(|t| t.simulated_time_ms).unwrap_or(0)
    }

    pub fn assistant_turns(&self) -> usize {
        self.turns.iter().filter(|t| t.role == Role::Assistant).count()
    }

    pub fn recovery_turns(&self) -> usize {
        self.turns.iter().filter(|t| t.is_recovery).count()
    }

    /// The user prompt (second turn) if present.
    pub fn prompt(&self) -> Option<&str> {
        self.turns.iter().find(|t| t.role == Role::User).map(|t| t.content.as_str())
    }

    /// One `.jsonl` line, without a trailing newline.
    pub fn to_json_line(&self) -> String {
        let line = Line {
            conversation: self
                .turns
                .iter()
                .map(|t| Message {
                    role: t.role,
                    content: Content::Parts(vec![TextPart { kind: "text".into(), text: t.content.clone() }]),
                })
                .collect(),
            meta: Meta {
                episode_id: self.episode_id.clone(),
                plan: self.plan.clone(),
                terminal: self.terminal.clone(),
                timings: self.turns.iter().map(|t| t.simulated_time_ms).collect(),
            },
        };
        serde_json::to_string(&line).expect("trajectory serializes")
    }

    /// Parses a line produced by [`Trajectory::to_json_line`]. Plain-string
    /// content and missing timings are accepted for externally produced traces.
    pub fn from_json_line(text: &str) -> Result<Trajectory, TraceFormatError> {
        let line: Line = serde_json::from_str(text)?;
        let n = line.conversation.len();
        if !line.meta.timings.is_empty() && line.meta.timings.len() != n {
            return Err(TraceFormatError::TimingMismatch { timings: line.meta.timings.len(), turns: n });
        }
        let turns = line
            .conversation
            .into_iter()
            .enumerate()
            .map(|(i, m)| {
                let text = match m.content {
                    Content::Plain(s) => s,
                    Content::Parts(parts) => parts.into_iter().map(|p| p.text).collect::<Vec<_>>().join(""),
                };
                Turn::new(m.role, text, line.meta.timings.get(i).copied().unwrap_or(0))
            })
            .collect();
        Ok(Trajectory { episode_id: line.meta.episode_id, turns, plan: line.meta.plan, terminal: line.meta.terminal })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovery_flag_follows_prefix() {
        assert!(Turn::new(Role::Assistant, "Recovery: Thought: x", 0).is_recovery);
        assert!(!Turn::new(Role::Assistant, "Thought: Recovery: x", 0).is_recovery);
        assert!(!Turn::new(Role::Function, "Recovery: x", 0).is_recovery);
    }

    #[test]
    fn line_round_trip_is_byte_stable() {
        let mut t = Trajectory::new("ep-1", InjectionPlan::clean(9));
        t.turns.push(Turn::new(Role::System, "sys", 0));
        t.turns.push(Turn::new(Role::User, "do \"it\"\n", 0));
        t.turns.push(Turn::new(Role::Assistant, "Recovery: Thought: ünïcode", 100));
        t.terminal = Some(Terminal::StepBudgetExhausted);
        let line = t.to_json_line();
        let back = Trajectory::from_json_line(&line).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.to_json_line(), line);
    }

    #[test]
    fn accepts_plain_string_content() {
        let text = r#"{"conversation":[{"role":"system","content":"s"},{"role":"user","content":"u"}],"meta":{"episode_id":"x","plan":{"turn_index":1,"seed":3}}}"#;
        let t = Trajectory::from_json_line(text).unwrap();
        assert_eq!(t.turns.len(), 2);
        assert_eq!(t.turns[1].content, "u");
    }
}
