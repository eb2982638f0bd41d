//! Recovery exemplar bank and signature-similarity retrieval.
//!
//! Each exemplar pairs a partially bound [`SignaturePattern`] with an
//! ordered script of [`RecoveryAction`]s. Retrieval returns the exemplar
//! at minimal [`similarity_distance`] from an observed signature, breaking
//! ties by the lexicographically smallest id.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::OnceLock;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taxonomy::{implied_status, message_tokens, Catalog, ErrorClass, ErrorSignature};

pub mod pydict;

const SHIPPED_BANK: &str = include_str!("../data/recovery_bank.json");

/// Exact non-negative distance value.
pub type Distance = Ratio<u64>;

#[derive(Debug, Error)]
pub enum BankError {
    #[error("duplicate exemplar id `{0}`")]
    DuplicateId(String),
    #[error("exemplar `{0}` has an empty script")]
    EmptyScript(String),
    #[error("exemplar `{0}` script does not end with terminate_gracefully")]
    UnterminatedScript(String),
    #[error("exemplar `{0}` has a fully wildcard pattern")]
    FullyWildcardPattern(String),
    #[error("exemplar `{id}` names unknown error class `{label}`")]
    UnknownErrorClass { id: String, label: String },
    #[error("branch key `{0}` does not name any kinds")]
    InvalidBranchKey(String),
    #[error("no exemplar covers error class {0}")]
    MissingClassCoverage(ErrorClass),
    #[error("bank is empty")]
    EmptyBank,
    #[error("pattern is fully wildcard")]
    WildcardPattern,
    #[error("reading dictionary: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing dictionary: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwitchStrategy {
    Alternative,
    Fallback,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationCheck {
    Url,
    Payload,
    Headers,
    Params,
}

/// One corrective step. Serialized as `{"action": "<name>", ...params}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum RecoveryAction {
    RetryWithBackoff { max_attempts: u32, base_delay_ms: u64, cap_ms: u64, respect_retry_after: bool },
    ReformatArguments { hint: String },
    SwitchTool { strategy: SwitchStrategy },
    RefreshCredentials,
    ValidateAndReissue { check: ValidationCheck },
    LenientParse,
    TerminateGracefully { report: String },
    WaitUntilHealthy { poll_interval_ms: u64, max_wait_ms: u64 },
}

impl RecoveryAction {
    pub const DEFAULT_BASE_DELAY_MS: u64 = 500;
    pub const DEFAULT_CAP_MS: u64 = 8000;

    pub fn backoff(max_attempts: u32, respect_retry_after: bool) -> Self {
        RecoveryAction::RetryWithBackoff {
            max_attempts,
            base_delay_ms: Self::DEFAULT_BASE_DELAY_MS,
            cap_ms: Self::DEFAULT_CAP_MS,
            respect_retry_after,
        }
    }

    pub fn terminate(report: &str) -> Self {
        RecoveryAction::TerminateGracefully { report: report.to_string() }
    }

    /// Snake-case action name, also used as the recovery family tag.
    pub fn name(&self) -> &'static str {
        match self {
            RecoveryAction::RetryWithBackoff { .. } => "retry_with_backoff",
            RecoveryAction::ReformatArguments { .. } => "reformat_arguments",
            RecoveryAction::SwitchTool { .. } => "switch_tool",
            RecoveryAction::RefreshCredentials => "refresh_credentials",
            RecoveryAction::ValidateAndReissue { .. } => "validate_and_reissue",
            RecoveryAction::LenientParse => "lenient_parse",
            RecoveryAction::TerminateGracefully { .. } => "terminate_gracefully",
            RecoveryAction::WaitUntilHealthy { .. } => "wait_until_healthy",
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self, RecoveryAction::TerminateGracefully { .. })
    }

    pub fn is_retry(&self) -> bool {
        matches!(self, RecoveryAction::RetryWithBackoff { .. } | RecoveryAction::WaitUntilHealthy { .. })
    }

    /// Number of turns this action may occupy when a script is executed.
    pub fn turns(&self) -> u32 {
        match self {
            RecoveryAction::RetryWithBackoff { max_attempts, .. } => (*max_attempts).max(1),
            _ => 1,
        }
    }
}

/// Expands a script into the per-turn move sequence an agent executes.
pub fn expand_script(script: &[RecoveryAction]) -> Vec<RecoveryAction> {
    script.iter().flat_map(|a| std::iter::repeat_n(a.clone(), a.turns() as usize)).collect()
}

/// Partially bound error signature. `None` fields are wildcards.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignaturePattern {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_class: Option<ErrorClass>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status_code: Option<u16>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message_tokens: Option<Vec<String>>,
}

impl SignaturePattern {
    pub fn is_fully_wildcard(&self) -> bool {
        self.error_class.is_none() && self.kind.is_none()
    }

    /// Pattern bound to every field of `sig`.
    pub fn exact(sig: &ErrorSignature) -> Self {
        SignaturePattern {
            error_class: Some(sig.error_class),
            kind: Some(sig.kind.clone()),
            status_code: sig.status_code,
            message_tokens: Some(message_tokens(&sig.message).into_iter().collect()),
        }
    }

    /// Class bound by the pattern, directly or through its kind.
    pub fn class(&self, catalog: &Catalog) -> Option<ErrorClass> {
        self.error_class.or_else(|| self.kind.as_deref().and_then(|k| catalog.class_of(k)))
    }

    fn expected_status(&self) -> StatusExpectation {
        match (self.status_code, self.kind.as_deref()) {
            (Some(code), _) => StatusExpectation::Exactly(code),
            (None, Some(kind)) => match implied_status(kind) {
                Some(code) => StatusExpectation::Exactly(code),
                None => StatusExpectation::Absent,
            },
            (None, None) => StatusExpectation::Any,
        }
    }
}

enum StatusExpectation {
    Any,
    Exactly(u16),
    Absent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistanceWeights {
    pub class: u64,
    pub kind: u64,
    pub status: u64,
    pub message: u64,
}

impl Default for DistanceWeights {
    fn default() -> Self {
        DistanceWeights { class: 4, kind: 2, status: 1, message: 1 }
    }
}

/// Jaccard index of two token sets; two empty sets are identical.
pub fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> Ratio<u64> {
    let union = a.union(b).count() as u64;
    if union == 0 {
        return Ratio::from_integer(1);
    }
    let inter = a.intersection(b).count() as u64;
    Ratio::new(inter, union)
}

/// Weighted mismatch between an observed signature and a pattern. A kind
/// bound in the pattern also implies its status (`http_503` → 503, any
/// other kind → no status) when `status_code` is left unbound.
pub fn similarity_distance(
    observed: &ErrorSignature,
    pattern: &SignaturePattern,
    weights: &DistanceWeights,
) -> Result<Distance, BankError> {
    if pattern.is_fully_wildcard() {
        return Err(BankError::WildcardPattern);
    }
    let mut d = Ratio::from_integer(0);
    if pattern.error_class.is_some_and(|c| c != observed.error_class) {
        d += weights.class;
    }
    if pattern.kind.as_deref().is_some_and(|k| k != observed.kind) {
        d += weights.kind;
    }
    let status_mismatch = match pattern.expected_status() {
        StatusExpectation::Any => false,
        StatusExpectation::Exactly(code) => observed.status_code != Some(code),
        StatusExpectation::Absent => observed.status_code.is_some(),
    };
    if status_mismatch {
        d += weights.status;
    }
    if let Some(tokens) = &pattern.message_tokens {
        let pattern_tokens = message_tokens(&tokens.join(" "));
        let observed_tokens = message_tokens(&observed.message);
        let sim = jaccard(&observed_tokens, &pattern_tokens);
        d += (Ratio::from_integer(1) - sim) * weights.message;
    }
    Ok(d)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueTurn {
    pub from: String,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecoveryExemplar {
    pub id: String,
    pub pattern: SignaturePattern,
    pub script: Vec<RecoveryAction>,
    #[serde(default)]
    pub rationale: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dialogue_template: Option<Vec<DialogueTurn>>,
}

impl RecoveryExemplar {
    pub fn has_retry(&self) -> bool {
        self.script.iter().any(RecoveryAction::is_retry)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarBank {
    pub version: String,
    pub exemplars: Vec<RecoveryExemplar>,
    #[serde(default)]
    pub weights: DistanceWeights,
}

impl ExemplarBank {
    /// The bank bundled with the crate.
    pub fn shipped() -> &'static ExemplarBank {
        static BANK: OnceLock<ExemplarBank> = OnceLock::new();
        BANK.get_or_init(|| DictionaryFile::shipped().into_bank().expect("shipped bank is valid"))
    }

    pub fn len(&self) -> usize {
        self.exemplars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exemplars.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&RecoveryExemplar> {
        self.exemplars.iter().find(|e| e.id == id)
    }

    /// Nearest exemplar; ties go to the smallest id.
    pub fn retrieve(&self, observed: &ErrorSignature) -> Option<&RecoveryExemplar> {
        self.top_k(observed, 1).into_iter().next().map(|(e, _)| e)
    }

    /// The `k` nearest exemplars in (distance, id) order.
    pub fn top_k(&self, observed: &ErrorSignature, k: usize) -> Vec<(&RecoveryExemplar, Distance)> {
        let mut scored: Vec<(&RecoveryExemplar, Distance)> = self
            .exemplars
            .iter()
            .filter_map(|e| similarity_distance(observed, &e.pattern, &self.weights).ok().map(|d| (e, d)))
            .collect();
        scored.sort_by(|(ea, da), (eb, db)| da.cmp(db).then_with(|| ea.id.cmp(&eb.id)));
        scored.truncate(k);
        scored
    }

    /// Copy of the bank without exemplars whose pattern names one of `kinds`.
    pub fn without_kinds(&self, kinds: &BTreeSet<String>) -> ExemplarBank {
        ExemplarBank {
            version: format!("{}-minus-{}", self.version, kinds.iter().cloned().collect::<Vec<_>>().join("+")),
            exemplars: self
                .exemplars
                .iter()
                .filter(|e| e.pattern.kind.as_ref().is_none_or(|k| !kinds.contains(k)))
                .cloned()
                .collect(),
            weights: self.weights,
        }
    }

    /// Classes not matched by any exemplar.
    pub fn uncovered_classes(&self, catalog: &Catalog) -> Vec<ErrorClass> {
        let covered: BTreeSet<ErrorClass> = self.exemplars.iter().filter_map(|e| e.pattern.class(catalog)).collect();
        ErrorClass::ALL.into_iter().filter(|c| !covered.contains(c)).collect()
    }

    pub fn exemplars_per_class(&self, catalog: &Catalog) -> BTreeMap<ErrorClass, usize> {
        let mut counts = BTreeMap::new();
        for e in &self.exemplars {
            if let Some(c) = e.pattern.class(catalog) {
                *counts.entry(c).or_insert(0) += 1;
            }
        }
        counts
    }
}

/// Pattern as written in a dictionary file. The class stays a label so
/// that unknown labels can be reported with the exemplar id.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_class: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status_code: Option<u16>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message_tokens: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExemplarSpec {
    pub id: String,
    pub pattern: PatternSpec,
    pub script: Vec<RecoveryAction>,
    #[serde(default)]
    pub rationale: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dialogue_template: Option<Vec<DialogueTurn>>,
}

/// A group of kinds sharing one script, e.g. `"401_403_407"`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchSpec {
    pub key: String,
    /// Explicit member kinds; derived from numeric codes in `key` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kinds: Option<Vec<String>>,
    pub script: Vec<RecoveryAction>,
    #[serde(default)]
    pub rationale: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dialogue_template: Option<Vec<DialogueTurn>>,
}

impl BranchSpec {
    pub fn member_kinds(&self) -> Result<Vec<String>, BankError> {
        if let Some(kinds) = &self.kinds {
            if kinds.is_empty() {
                return Err(BankError::InvalidBranchKey(self.key.clone()));
            }
            return Ok(kinds.clone());
        }
        let codes: Option<Vec<u16>> = self.key.split('_').map(|p| p.parse::<u16>().ok()).collect();
        match codes {
            Some(codes) if !codes.is_empty() => Ok(codes.into_iter().map(|c| format!("http_{c}")).collect()),
            _ => Err(BankError::InvalidBranchKey(self.key.clone())),
        }
    }
}

/// On-disk dictionary format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DictionaryFile {
    pub version: String,
    #[serde(default)]
    pub exemplars: Vec<ExemplarSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub branches: Vec<BranchSpec>,
}

impl DictionaryFile {
    /// The dictionary the shipped bank is built from.
    pub fn shipped() -> DictionaryFile {
        serde_json::from_str(SHIPPED_BANK).expect("shipped bank parses")
    }

    /// Adds `other`'s exemplars and branches; entries with an existing id or
    /// branch key replace the old ones.
    pub fn merge(&mut self, other: DictionaryFile) {
        for e in other.exemplars {
            self.exemplars.retain(|x| x.id != e.id);
            self.exemplars.push(e);
        }
        for b in other.branches {
            self.branches.retain(|x| x.key != b.key);
            self.branches.push(b);
        }
    }

    /// Expands branches, validates every invariant and builds the bank.
    pub fn into_bank(self) -> Result<ExemplarBank, BankError> {
        let catalog = Catalog::shipped();
        let mut specs = self.exemplars;
        for branch in self.branches {
            for kind in branch.member_kinds()? {
                let known = catalog.get(&kind);
                specs.push(ExemplarSpec {
                    id: format!("G:{}:{}", branch.key, kind),
                    pattern: PatternSpec {
                        error_class: known.map(|k| k.error_class.as_str().to_string()),
                        status_code: known.and_then(|k| k.http_status),
                        message_tokens: known.map(|k| message_tokens(&k.example_message()).into_iter().collect()),
                        kind: Some(kind),
                    },
                    script: branch.script.clone(),
                    rationale: branch.rationale.clone(),
                    dialogue_template: branch.dialogue_template.clone(),
                });
            }
        }

        let mut ids = BTreeSet::new();
        let mut exemplars = Vec::with_capacity(specs.len());
        for spec in specs {
            if !ids.insert(spec.id.clone()) {
                return Err(BankError::DuplicateId(spec.id));
            }
            if spec.script.is_empty() {
                return Err(BankError::EmptyScript(spec.id));
            }
            if !spec.script.last().is_some_and(RecoveryAction::is_terminal) {
                return Err(BankError::UnterminatedScript(spec.id));
            }
            let error_class = match &spec.pattern.error_class {
                Some(label) => Some(
                    label
                        .parse::<ErrorClass>()
                        .map_err(|_| BankError::UnknownErrorClass { id: spec.id.clone(), label: label.clone() })?,
                ),
                None => None,
            };
            let pattern = SignaturePattern {
                error_class,
                kind: spec.pattern.kind,
                status_code: spec.pattern.status_code,
                message_tokens: spec.pattern.message_tokens,
            };
            if pattern.is_fully_wildcard() {
                return Err(BankError::FullyWildcardPattern(spec.id));
            }
            exemplars.push(RecoveryExemplar {
                id: spec.id,
                pattern,
                script: spec.script,
                rationale: spec.rationale,
                dialogue_template: spec.dialogue_template,
            });
        }
        if exemplars.is_empty() {
            return Err(BankError::EmptyBank);
        }
        let bank = ExemplarBank { version: self.version, exemplars, weights: DistanceWeights::default() };
        if let Some(class) = bank.uncovered_classes(catalog).into_iter().next() {
            return Err(BankError::MissingClassCoverage(class));
        }
        Ok(bank)
    }
}

/// Loads and validates a JSON dictionary file.
pub fn load_bank(path: &Path) -> Result<ExemplarBank, BankError> {
    let text = std::fs::read_to_string(path)?;
    parse_bank(&text)
}

pub fn parse_bank(text: &str) -> Result<ExemplarBank, BankError> {
    let file: DictionaryFile = serde_json::from_str(text).map_err(|e| BankError::Parse(e.to_string()))?;
    file.into_bank()
}

/// Built-in corrective policy for a failure kind.
pub fn default_script_for_kind(kind: &str) -> Vec<RecoveryAction> {
    use RecoveryAction as A;
    let terminate = |report: &str| A::terminate(report);
    let persist = "Recovery failed: {tool} kept returning {kind} ({message}). Stopping and reporting the failure.";
    match kind {
        "http_400" => vec![
            A::ValidateAndReissue { check: ValidationCheck::Payload },
            A::ReformatArguments { hint: "match the documented parameter formats".into() },
            terminate(persist),
        ],
        "http_422" => vec![
            A::ReformatArguments { hint: "keep values within the documented ranges and formats".into() },
            A::ValidateAndReissue { check: ValidationCheck::Params },
            terminate(persist),
        ],
        "missing_argument" => vec![
            A::ReformatArguments { hint: "supply every required parameter".into() },
            A::ValidateAndReissue { check: ValidationCheck::Params },
            terminate(persist),
        ],
        "http_401" => vec![terminate(
            "Authentication failed: {tool} rejected the API key ({message}). Stopping without retrying; valid credentials are required.",
        )],
        "http_403" => vec![terminate(
            "Authorization failed: no permission to use {tool} ({message}). Stopping without retrying.",
        )],
        "http_407" => vec![A::RefreshCredentials, terminate(persist)],
        "http_404" | "tool_not_found" => vec![
            A::ValidateAndReissue { check: ValidationCheck::Url },
            A::SwitchTool { strategy: SwitchStrategy::Alternative },
            terminate(persist),
        ],
        "http_410" => vec![A::SwitchTool { strategy: SwitchStrategy::Alternative }, terminate(persist)],
        "http_429" | "http_500" | "http_502" | "http_503" | "http_504" => {
            vec![A::backoff(3, true), terminate(persist)]
        }
        "timeout" | "connection_reset" => vec![A::backoff(3, false), terminate(persist)],
        "dns_error" => vec![
            A::ValidateAndReissue { check: ValidationCheck::Url },
            A::backoff(2, false),
            terminate(persist),
        ],
        "malformed_json" => vec![
            A::backoff(1, false),
            A::LenientParse,
            A::SwitchTool { strategy: SwitchStrategy::Fallback },
            terminate(persist),
        ],
        "schema_violation" => vec![
            A::LenientParse,
            A::SwitchTool { strategy: SwitchStrategy::Fallback },
            terminate(persist),
        ],
        "null_field" => vec![
            A::ValidateAndReissue { check: ValidationCheck::Params },
            A::SwitchTool { strategy: SwitchStrategy::Fallback },
            terminate(persist),
        ],
        "truncated_output" => vec![
            A::ValidateAndReissue { check: ValidationCheck::Params },
            A::backoff(1, false),
            terminate(persist),
        ],
        "pagination_incomplete" => {
            vec![A::ValidateAndReissue { check: ValidationCheck::Params }, terminate(persist)]
        }
        "partial_batch" => {
            vec![A::ValidateAndReissue { check: ValidationCheck::Payload }, terminate(persist)]
        }
        "plan_contradiction" | "stale_reference" | "missing_prerequisite" | "agent_protocol_error" => {
            vec![A::ValidateAndReissue { check: ValidationCheck::Params }, terminate(persist)]
        }
        _ => vec![A::backoff(1, false), terminate(persist)],
    }
}
