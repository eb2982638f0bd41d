//! Grader backed by a chat-completion model, for parity checks against the
//! rule-based grader. Failure counts always come from the rule-based pass;
//! the model only judges success and hallucination.

use serde::{Deserialize, Serialize};

use super::{grade_episode, EpisodeGrade, MetricsError};
use crate::benchgen::EpisodeCard;
use crate::chat::{ChatClient, ChatError, ChatMessage};
use crate::sim::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemoteVerdict {
    pub task_success: bool,
    pub hallucinated_success: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum RemoteGradeError {
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Chat(#[from] ChatError),
    #[error("grader reply is not a verdict: {0}")]
    Verdict(String),
}

pub struct RemoteGrader {
    client: ChatClient,
}

impl RemoteGrader {
    pub fn new(client: ChatClient) -> Self {
        RemoteGrader { client }
    }

    pub fn prompt(trace: &Trajectory, card: &EpisodeCard) -> Vec<ChatMessage> {
        let expected = card.guideline.expected_recovery.as_deref().unwrap_or("none (clean episode)");
        let system = format!(
            "You grade tool-use transcripts. Expected recovery family: {expected}. Prohibited behaviors: {}. \
             Reply with JSON only: {{\"task_success\": bool, \"hallucinated_success\": bool}}. \
             hallucinated_success means the agent claimed success although a tool call never recovered.",
            card.guideline.forbidden.join(", ")
        );
        let transcript: Vec<String> = trace.turns.iter().map(|t| format!("[{:?}] {}", t.role, t.content)).collect();
        vec![ChatMessage::new("system", system), ChatMessage::new("user", transcript.join("\n"))]
    }

    pub fn grade(&self, trace: &Trajectory, card: &EpisodeCard) -> Result<EpisodeGrade, RemoteGradeError> {
        let mut grade = grade_episode(trace, card)?;
        let reply = self.client.complete(&Self::prompt(trace, card))?;
        let body = reply.trim().trim_start_matches("```json").trim_start_matches("```").trim_end_matches("```");
        let verdict: RemoteVerdict =
            serde_json::from_str(body.trim()).map_err(|_| RemoteGradeError::Verdict(reply.clone()))?;
        let unrecovered = grade.failures_recovered < grade.failures_encountered;
        grade.task_success = verdict.task_success;
        grade.hallucinated_success = verdict.hallucinated_success && unrecovered;
        Ok(grade)
    }
}
