//! Adapter for an external chat-completion model.

use super::{AgentAction, AgentError, AgentPolicy, DecisionContext, ToolInvocation};
use crate::bank::{RecoveryAction, SwitchStrategy, ValidationCheck};
use crate::chat::{ChatClient, ChatError, ChatMessage};
use crate::sim::grammar::{parse_assistant, ParsedAction};
use crate::sim::Role;

/// Asks a remote model for each assistant turn and parses its reply with the
/// simulator's action grammar.
pub struct RemoteChatPolicy {
    client: ChatClient,
}

impl RemoteChatPolicy {
    pub fn new(client: ChatClient) -> Self {
        RemoteChatPolicy { client }
    }
}

/// Conversation so far in chat-completion message form. Function turns are
/// passed as user observations.
pub fn chat_messages(ctx: &DecisionContext<'_>) -> Vec<ChatMessage> {
    ctx.trajectory
        .turns
        .iter()
        .map(|t| match t.role {
            Role::System => ChatMessage::new("system", t.content.clone()),
            Role::User => ChatMessage::new("user", t.content.clone()),
            Role::Assistant => ChatMessage::new("assistant", t.content.clone()),
            Role::Function => ChatMessage::new("user", format!("Observation: {}", t.content)),
        })
        .collect()
}

impl AgentPolicy for RemoteChatPolicy {
    fn name(&self) -> &str {
        "remote"
    }

    fn decide(&self, ctx: &DecisionContext<'_>) -> Result<AgentAction, AgentError> {
        let reply = self.client.complete(&chat_messages(ctx)).map_err(|e| match e {
            ChatError::Transport(msg) | ChatError::Config(msg) => AgentError::Transport(msg),
            ChatError::Response(msg) => AgentError::Transport(msg),
        })?;
        let parsed = parse_assistant(&reply).map_err(|_| AgentError::Protocol { raw: reply.clone() })?;
        let action = match parsed.action {
            ParsedAction::Call { name, args } if parsed.recovery => AgentAction::RecoveryStep {
                action: infer_recovery_action(&parsed.thought),
                thought: parsed.thought,
                call: Some(ToolInvocation { name, args }),
            },
            ParsedAction::Call { name, args } => AgentAction::ToolCall { name, args, thought: parsed.thought },
            ParsedAction::Finish { answer } => AgentAction::Finish { answer, thought: parsed.thought },
            ParsedAction::GiveUp { report } if parsed.recovery => AgentAction::RecoveryStep {
                action: RecoveryAction::TerminateGracefully { report },
                thought: parsed.thought,
                call: None,
            },
            ParsedAction::GiveUp { report } => AgentAction::GiveUp { report, thought: parsed.thought },
        };
        Ok(action)
    }
}

/// Best-effort mapping from a recovery thought to the action it describes.
/// The first sentence is consulted before the whole text.
pub fn infer_recovery_action(thought: &str) -> RecoveryAction {
    let lower = thought.to_lowercase();
    let first = lower.split(['.', '\n']).next().unwrap_or_default().to_string();
    from_text(&first).or_else(|| from_text(&lower)).unwrap_or_else(|| RecoveryAction::backoff(1, true))
}

fn from_text(text: &str) -> Option<RecoveryAction> {
    let has = |needle: &str| text.contains(needle);
    if has("switch") || has("alternative") || has("fallback") {
        let strategy = if has("fallback") { SwitchStrategy::Fallback } else { SwitchStrategy::Alternative };
        return Some(RecoveryAction::SwitchTool { strategy });
    }
    if has("credential") {
        return Some(RecoveryAction::RefreshCredentials);
    }
    if has("lenient") {
        return Some(RecoveryAction::LenientParse);
    }
    if has("validat") {
        let check = if has("url") {
            ValidationCheck::Url
        } else if has("payload") {
            ValidationCheck::Payload
        } else if has("header") {
            ValidationCheck::Headers
        } else {
            ValidationCheck::Params
        };
        return Some(RecoveryAction::ValidateAndReissue { check });
    }
    if has("rewrit") || has("reformat") {
        return Some(RecoveryAction::ReformatArguments { hint: String::new() });
    }
    if has("healthy") {
        return Some(RecoveryAction::WaitUntilHealthy {
            poll_interval_ms: RecoveryAction::DEFAULT_BASE_DELAY_MS,
            max_wait_ms: RecoveryAction::DEFAULT_CAP_MS,
        });
    }
    if has("immediately") {
        return Some(RecoveryAction::RetryWithBackoff {
            max_attempts: 1,
            base_delay_ms: 0,
            cap_ms: 0,
            respect_retry_after: false,
        });
    }
    if has("backoff") || has("retry") || has("retrying") || has("wait") {
        return Some(RecoveryAction::backoff(1, has("retry-after")));
    }
    None
}
