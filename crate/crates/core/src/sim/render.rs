//! Rendering of injected failures into function-turn text.

use rand::Rng;
use serde_json::{Map, Value};

use super::ToolSpec;
use crate::seed;
use crate::taxonomy::{FailureKind, Manifestation, TRUNCATION_MARKER};

/// Renders `kind` as it would appear in place of `tool`'s normal response.
/// The normal response is the tool's first scripted response.
pub fn render_failure(kind: &FailureKind, manifestation: Manifestation, tool: &ToolSpec, seed: u64) -> String {
    let normal = tool.scripted_responses.values().next().map(String::as_str).unwrap_or("{}");
    render_against(kind, manifestation, normal, seed, None)
}

/// Renders against an explicit normal response, optionally announcing a
/// Retry-After hint in error payloads.
pub fn render_against(
    kind: &FailureKind,
    manifestation: Manifestation,
    normal: &str,
    seed: u64,
    retry_after_ms: Option<u64>,
) -> String {
    match manifestation {
        Manifestation::ErrorPayload => error_payload(kind, retry_after_ms),
        Manifestation::SilentFailure => String::new(),
        Manifestation::MalformedOutput => malformed_prefix(normal, seed),
        Manifestation::PartialOutput => partial_fields(normal),
    }
}

fn error_payload(kind: &FailureKind, retry_after_ms: Option<u64>) -> String {
    let Some(after) = retry_after_ms else {
        return kind.example_output.clone();
    };
    match serde_json::from_str::<Value>(&kind.example_output) {
        Ok(Value::Object(mut map)) => {
            map.insert("retry_after_ms".into(), Value::from(after));
            Value::Object(map).to_string()
        }
        _ => kind.example_output.clone(),
    }
}

/// A proper prefix of the normal response; a strict parser rejects it
/// because the closing bracket is always cut.
fn malformed_prefix(normal: &str, seed: u64) -> String {
    let trimmed = normal.trim();
    let body = if trimmed.starts_with('{') && trimmed.len() >= 2 { trimmed } else { "{\"result\": null}" };
    let max_cut = body.len() - 1;
    let mut cut = seed::rng(seed).gen_range(1..=max_cut);
    while !body.is_char_boundary(cut) {
        cut -= 1;
    }
    body[..cut].to_string()
}

fn partial_fields(normal: &str) -> String {
    let mut out = Map::new();
    if let Ok(Value::Object(map)) = serde_json::from_str::<Value>(normal.trim()) {
        let keep = map.len() / 2;
        out.extend(map.into_iter().take(keep));
    }
    out.insert(TRUNCATION_MARKER.into(), Value::Bool(true));
    Value::Object(out).to_string()
}
