//! The assistant-turn surface grammar:
//!
//! ```text
//! [Recovery: ]Thought: <free text>
//! Action: <tool name | Finish>
//! Action Input: <json object>
//! ```
//!
//! `Finish` takes `{"return_type": "give_answer" | "give_up", "final_answer": ...}`.

use serde_json::{json, Value};

use super::trajectory::RECOVERY_PREFIX;

pub const FINISH: &str = "Finish";

#[derive(Debug, Clone, PartialEq)]
pub enum ParsedAction {
    Call { name: String, args: Value },
    Finish { answer: String },
    GiveUp { report: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedTurn {
    pub recovery: bool,
    pub thought: String,
    pub action: ParsedAction,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProtocolError {
    #[error("missing `Action:` line")]
    MissingAction,
    #[error("missing `Action Input:` line")]
    MissingInput,
    #[error("action input is not a JSON object: {0}")]
    BadInput(String),
    #[error("Finish input lacks a usable return_type/final_answer")]
    BadFinish,
}

/// Compact JSON with sorted keys.
pub fn canonical_json(value: &Value) -> String {
    serde_json::to_string(value).expect("json value serializes")
}

pub fn render_call(recovery: bool, thought: &str, name: &str, args: &Value) -> String {
    format!(
        "{}Thought: {}\nAction: {}\nAction Input: {}",
        if recovery { "Recovery: " } else { "" },
        thought.trim(),
        name,
        canonical_json(args)
    )
}

pub fn render_finish(recovery: bool, thought: &str, answer: &str) -> String {
    let input = json!({"return_type": "give_answer", "final_answer": answer});
    render_call(recovery, thought, FINISH, &input)
}

pub fn render_give_up(recovery: bool, thought: &str, report: &str) -> String {
    let input = json!({"return_type": "give_up", "final_answer": report});
    render_call(recovery, thought, FINISH, &input)
}

pub fn parse_assistant(text: &str) -> Result<ParsedTurn, ProtocolError> {
    let mut body = text.trim_start();
    let recovery = body.starts_with(RECOVERY_PREFIX);
    if recovery {
        body = body[RECOVERY_PREFIX.len()..].trim_start();
    }

    let action_at = find_line_marker(body, "Action:").ok_or(ProtocolError::MissingAction)?;
    let head = &body[..action_at];
    let thought = head.trim().strip_prefix("Thought:").unwrap_or(head.trim()).trim().to_string();
    let rest = &body[action_at + "Action:".len()..];
    let input_at = find_line_marker(rest, "Action Input:").ok_or(ProtocolError::MissingInput)?;
    let name = rest[..input_at].trim().to_string();
    if name.is_empty() {
        return Err(ProtocolError::MissingAction);
    }
    let raw_input = rest[input_at + "Action Input:".len()..].trim();
    let args: Value = serde_json::from_str(raw_input).map_err(|e| ProtocolError::BadInput(e.to_string()))?;
    if !args.is_object() {
        return Err(ProtocolError::BadInput("expected an object".into()));
    }

    let action = if name == FINISH {
        let answer = args.get("final_answer").and_then(Value::as_str).ok_or(ProtocolError::BadFinish)?.to_string();
        match args.get("return_type").and_then(Value::as_str) {
            Some("give_answer") | None => ParsedAction::Finish { answer },
            Some("give_up") | Some("give_up_and_restart") => ParsedAction::GiveUp { report: answer },
            Some(_) => return Err(ProtocolError::BadFinish),
        }
    } else {
        ParsedAction::Call { name, args }
    };
    Ok(ParsedTurn { recovery, thought, action })
}

/// Byte offset of `marker` where it starts a line (or the text).
fn find_line_marker(text: &str, marker: &str) -> Option<usize> {
    if text.starts_with(marker) {
        return Some(0);
    }
    let needle = format!("\n{marker}");
    text.find(&needle).map(|i| i + 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn call_round_trip() {
        let args = json!({"b": 2, "a": "x"});
        let text = render_call(false, "look it up", "weather", &args);
        assert_eq!(text, "Thought: look it up\nAction: weather\nAction Input: {\"a\":\"x\",\"b\":2}");
        let parsed = parse_assistant(&text).unwrap();
        assert!(!parsed.recovery);
        assert_eq!(parsed.thought, "look it up");
        assert_eq!(parsed.action, ParsedAction::Call { name: "weather".into(), args });
    }

    #[test]
    fn recovery_and_finish() {
        let text = render_finish(true, "done", "It is 18C");
        let parsed = parse_assistant(&text).unwrap();
        assert!(parsed.recovery);
        assert_eq!(parsed.action, ParsedAction::Finish { answer: "It is 18C".into() });
        let text = render_give_up(false, "stop", "could not reach the API");
        assert!(matches!(parse_assistant(&text).unwrap().action, ParsedAction::GiveUp { .. }));
    }

    #[test]
    fn multi_line_input_and_thought() {
        let text = "Recovery: Thought: The API call failed\nso retry.\nAction: user_medias\nAction Input: {\n \"user_id\": \"113\"\n}";
        let parsed = parse_assistant(text).unwrap();
        assert!(parsed.recovery);
        assert_eq!(parsed.thought, "The API call failed\nso retry.");
        assert_eq!(parsed.action, ParsedAction::Call { name: "user_medias".into(), args: json!({"user_id": "113"}) });
    }

    #[test]
    fn prose_is_rejected() {
        assert_eq!(parse_assistant("I think the answer is 4."), Err(ProtocolError::MissingAction));
        assert_eq!(parse_assistant("Action: x"), Err(ProtocolError::MissingInput));
        assert!(matches!(parse_assistant("Action: x\nAction Input: [1]"), Err(ProtocolError::BadInput(_))));
        assert!(matches!(parse_assistant("Action: x\nAction Input: {oops"), Err(ProtocolError::BadInput(_))));
    }
}
