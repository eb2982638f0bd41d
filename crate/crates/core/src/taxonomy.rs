//! Error taxonomy, failure catalog and error signatures.
//!
//! The seven error classes form a closed set. Concrete runtime failures
//! (`http_429`, `timeout`, `malformed_json`, ...) live in a versioned
//! catalog and each belongs to exactly one class. Observed tool output is
//! normalized into an [`ErrorSignature`] by [`classify_raw_failure`].

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

const SHIPPED_CATALOG: &str = include_str!("../data/catalog.json");

/// Kind assigned to text the classifier cannot attribute to any catalog entry.
pub const UNKNOWN_KIND: &str = "unknown";

/// Marker field added to partially rendered tool responses.
pub const TRUNCATION_MARKER: &str = "_truncated";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TaxonomyError {
    #[error("unknown error class label `{0}`")]
    UnknownErrorClass(String),
    #[error("unknown manifestation label `{0}`")]
    UnknownManifestation(String),
    #[error("invalid catalog: {0}")]
    InvalidCatalog(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ErrorClass {
    ToolHallucination,
    ArgumentHallucination,
    InvalidToolInvocation,
    PartialExecution,
    OutputHallucination,
    InvalidIntermediateReasoning,
    ReentrantFailure,
}

impl ErrorClass {
    pub const ALL: [ErrorClass; 7] = [
        ErrorClass::ToolHallucination,
        ErrorClass::ArgumentHallucination,
        ErrorClass::InvalidToolInvocation,
        ErrorClass::PartialExecution,
        ErrorClass::OutputHallucination,
        ErrorClass::InvalidIntermediateReasoning,
        ErrorClass::ReentrantFailure,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorClass::ToolHallucination => "ToolHallucination",
            ErrorClass::ArgumentHallucination => "ArgumentHallucination",
            ErrorClass::InvalidToolInvocation => "InvalidToolInvocation",
            ErrorClass::PartialExecution => "PartialExecution",
            ErrorClass::OutputHallucination => "OutputHallucination",
            ErrorClass::InvalidIntermediateReasoning => "InvalidIntermediateReasoning",
            ErrorClass::ReentrantFailure => "ReentrantFailure",
        }
    }
}

impl fmt::Display for ErrorClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ErrorClass {
    type Err = TaxonomyError;

    /// Accepts both `ToolHallucination` and `tool_hallucination` spellings.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let folded: String = s.chars().filter(|c| *c != '_' && *c != '-').collect();
        ErrorClass::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(&folded))
            .ok_or_else(|| TaxonomyError::UnknownErrorClass(s.to_string()))
    }
}

/// How a failure shows up in the function-turn text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Manifestation {
    /// Structured error body.
    ErrorPayload,
    /// Syntactically broken body.
    MalformedOutput,
    /// Empty response.
    SilentFailure,
    /// Truncated but valid body.
    PartialOutput,
}

impl Manifestation {
    pub const ALL: [Manifestation; 4] = [
        Manifestation::ErrorPayload,
        Manifestation::MalformedOutput,
        Manifestation::SilentFailure,
        Manifestation::PartialOutput,
    ];
}

impl FromStr for Manifestation {
    type Err = TaxonomyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let folded: String = s.chars().filter(|c| *c != '_' && *c != '-').collect();
        Manifestation::ALL
            .into_iter()
            .find(|m| format!("{m:?}").eq_ignore_ascii_case(&folded))
            .ok_or_else(|| TaxonomyError::UnknownManifestation(s.to_string()))
    }
}

fn default_true() -> bool {
    true
}

/// One concrete runtime failure from the catalog.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureKind {
    pub identifier: String,
    pub error_class: ErrorClass,
    pub default_manifestation: Manifestation,
    /// Body rendered for the `ErrorPayload` manifestation.
    pub example_output: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub http_status: Option<u16>,
    /// Whether suite generation may inject this kind.
    #[serde(default = "default_true")]
    pub injectable: bool,
}

impl FailureKind {
    /// The human-readable error message embedded in `example_output`.
    pub fn example_message(&self) -> String {
        match serde_json::from_str::<Value>(&self.example_output) {
            Ok(Value::Object(map)) => map.get("error").and_then(Value::as_str).unwrap_or_default().to_string(),
            _ => self.example_output.clone(),
        }
    }

    /// Signature of this kind as the classifier would see its example output.
    pub fn example_signature(&self, tool_name: &str, turn_index: usize) -> ErrorSignature {
        ErrorSignature {
            error_class: self.error_class,
            kind: self.identifier.clone(),
            status_code: self.http_status,
            message: self.example_message(),
            tool_name: tool_name.to_string(),
            turn_index,
            manifestation: Manifestation::ErrorPayload,
            retry_after_ms: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Catalog {
    pub version: String,
    pub failures: Vec<FailureKind>,
}

impl Catalog {
    pub fn from_json(text: &str) -> Result<Catalog, TaxonomyError> {
        let catalog: Catalog = serde_json::from_str(text).map_err(|e| TaxonomyError::InvalidCatalog(e.to_string()))?;
        catalog.validate()?;
        Ok(catalog)
    }

    /// The catalog bundled with the crate.
    pub fn shipped() -> &'static Catalog {
        static CATALOG: OnceLock<Catalog> = OnceLock::new();
        CATALOG.get_or_init(|| Catalog::from_json(SHIPPED_CATALOG).expect("shipped catalog is valid"))
    }

    fn validate(&self) -> Result<(), TaxonomyError> {
        let mut seen = BTreeSet::new();
        for kind in &self.failures {
            if !seen.insert(kind.identifier.as_str()) {
                return Err(TaxonomyError::InvalidCatalog(format!("duplicate identifier `{}`", kind.identifier)));
            }
            let is_http = kind.identifier.starts_with("http_");
            if is_http != kind.http_status.is_some() {
                return Err(TaxonomyError::InvalidCatalog(format!(
                    "`{}`: http_status must be present exactly for http_* kinds",
                    kind.identifier
                )));
            }
        }
        Ok(())
    }

    pub fn get(&self, identifier: &str) -> Option<&FailureKind> {
        self.failures.iter().find(|k| k.identifier == identifier)
    }

    pub fn kinds_of_class(&self, class: ErrorClass) -> impl Iterator<Item = &FailureKind> {
        self.failures.iter().filter(move |k| k.error_class == class)
    }

    pub fn injectable(&self) -> impl Iterator<Item = &FailureKind> {
        self.failures.iter().filter(|k| k.injectable)
    }

    /// Class of a kind identifier, including synthesized `http_NNN` kinds.
    pub fn class_of(&self, identifier: &str) -> Option<ErrorClass> {
        if let Some(kind) = self.get(identifier) {
            return Some(kind.error_class);
        }
        implied_status(identifier).map(class_for_unlisted_status)
    }
}

/// Status code implied by an `http_NNN` kind identifier.
pub fn implied_status(kind: &str) -> Option<u16> {
    kind.strip_prefix("http_").and_then(|code| code.parse::<u16>().ok()).filter(|code| (100..=599).contains(code))
}

fn class_for_unlisted_status(status: u16) -> ErrorClass {
    if status >= 500 {
        ErrorClass::ReentrantFailure
    } else {
        ErrorClass::InvalidToolInvocation
    }
}

/// Canonical description of an observed runtime failure.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ErrorSignature {
    pub error_class: ErrorClass,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status_code: Option<u16>,
    pub message: String,
    pub tool_name: String,
    pub turn_index: usize,
    pub manifestation: Manifestation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retry_after_ms: Option<u64>,
}

/// Lowercase alphabetic tokens of a message; digits are stripped so that
/// volatile ids do not split otherwise identical messages.
pub fn message_tokens(message: &str) -> BTreeSet<String> {
    message
        .split(|c: char| !c.is_alphanumeric())
        .map(|tok| tok.chars().filter(|c| !c.is_ascii_digit()).flat_map(char::to_lowercase).collect::<String>())
        .filter(|tok| !tok.is_empty())
        .collect()
}

/// Stable dedup key: kind, status and the sorted message token set.
pub fn canonical_key(sig: &ErrorSignature) -> String {
    let status = sig.status_code.map(|s| s.to_string()).unwrap_or_default();
    let tokens: Vec<String> = message_tokens(&sig.message).into_iter().collect();
    format!("{}|{}|{}", sig.kind.trim().to_lowercase(), status, tokens.join(" "))
}

/// Context attached to a classified failure.
#[derive(Debug, Clone, Copy)]
pub struct FailureContext<'a> {
    pub tool_name: &'a str,
    pub turn_index: usize,
}

/// Returns `Some` when a tool output denotes a failure, `None` for a
/// successful response.
pub fn classify_tool_output(raw: &str, ctx: FailureContext<'_>) -> Option<ErrorSignature> {
    let trimmed = raw.trim();
    if trimmed.is_empty() {
        return Some(classify_raw_failure(raw, ctx));
    }
    match serde_json::from_str::<Value>(trimmed) {
        Ok(Value::Object(map)) => {
            let has_error = map.get("error").and_then(Value::as_str).is_some_and(|e| !e.trim().is_empty());
            let bad_status = map.get("status").and_then(Value::as_u64).is_some_and(|s| s >= 400);
            let truncated = map.get(TRUNCATION_MARKER).and_then(Value::as_bool) == Some(true);
            (has_error || bad_status || truncated).then(|| classify_raw_failure(raw, ctx))
        }
        Ok(_) => None,
        Err(_) => Some(classify_raw_failure(raw, ctx)),
    }
}

/// Normalizes the text of a failed call into a signature. Total: text the
/// classifier does not recognize maps to kind `unknown`.
pub fn classify_raw_failure(raw: &str, ctx: FailureContext<'_>) -> ErrorSignature {
    classify_with(Catalog::shipped(), raw, ctx)
}

pub fn classify_with(catalog: &Catalog, raw: &str, ctx: FailureContext<'_>) -> ErrorSignature {
    let make = |kind: &str, manifestation: Manifestation, status: Option<u16>, message: String| {
        let error_class = catalog.class_of(kind).unwrap_or(ErrorClass::InvalidToolInvocation);
        ErrorSignature {
            error_class,
            kind: kind.to_string(),
            status_code: status,
            message,
            tool_name: ctx.tool_name.to_string(),
            turn_index: ctx.turn_index,
            manifestation,
            retry_after_ms: None,
        }
    };

    let trimmed = raw.trim();
    if trimmed.is_empty() {
        return make(UNKNOWN_KIND, Manifestation::SilentFailure, None, String::new());
    }

    match serde_json::from_str::<Value>(trimmed) {
        Ok(Value::Object(map)) => {
            let message = map.get("error").and_then(Value::as_str).unwrap_or_default().to_string();
            let retry_after = map.get("retry_after_ms").and_then(Value::as_u64);
            if map.get(TRUNCATION_MARKER).and_then(Value::as_bool) == Some(true) {
                return make("truncated_output", Manifestation::PartialOutput, None, "response truncated".to_string());
            }
            if let Some(status) = map
                .get("status")
                .and_then(Value::as_u64)
                .and_then(|s| u16::try_from(s).ok())
                .filter(|s| (100..=599).contains(s))
            {
                let mut sig = make(&format!("http_{status}"), Manifestation::ErrorPayload, Some(status), message);
                sig.retry_after_ms = retry_after;
                return sig;
            }
            let kind = lookup_message(catalog, &message).unwrap_or(UNKNOWN_KIND);
            let mut sig = make(kind, Manifestation::ErrorPayload, None, message);
            sig.retry_after_ms = retry_after;
            sig
        }
        Ok(_) => make(UNKNOWN_KIND, Manifestation::ErrorPayload, None, trimmed.to_string()),
        Err(_) => classify_text(catalog, trimmed, make),
    }
}

fn lookup_message<'c>(catalog: &'c Catalog, message: &str) -> Option<&'c str> {
    let wanted = message_tokens(message);
    if wanted.is_empty() {
        return None;
    }
    catalog
        .failures
        .iter()
        .filter(|k| k.http_status.is_none())
        .find(|k| message_tokens(&k.example_message()) == wanted)
        .map(|k| k.identifier.as_str())
}

fn classify_text<F>(catalog: &Catalog, text: &str, make: F) -> ErrorSignature
where
    F: Fn(&str, Manifestation, Option<u16>, String) -> ErrorSignature,
{
    let lower = text.to_lowercase();
    let payload = Manifestation::ErrorPayload;
    if text.starts_with('{') || text.starts_with('[') {
        make("malformed_json", Manifestation::MalformedOutput, None, "unparsable response body".to_string())
    } else if lower.contains("getaddrinfo") {
        make("dns_error", payload, None, text.to_string())
    } else if lower.contains("connectionerror") {
        make("connection_reset", payload, None, text.to_string())
    } else if lower.contains("timeout") {
        make("timeout", payload, None, text.to_string())
    } else if lower.contains("validationerror") {
        make("schema_violation", payload, None, text.to_string())
    } else if lower.contains("syntaxerror") || lower.contains("json.parse") {
        make("malformed_json", payload, None, text.to_string())
    } else if let Some(kind) = lookup_message(catalog, text) {
        make(kind, payload, None, text.to_string())
    } else {
        make(UNKNOWN_KIND, payload, None, text.to_string())
    }
}
