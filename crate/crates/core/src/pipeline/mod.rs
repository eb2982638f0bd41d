//! Recovery-annotated corpus construction: find the first failure in a
//! trace, truncate there, let a teacher continue with recovery turns,
//! finalize clean traces and compose a seeded corpus.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use num_rational::Ratio;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{final_answer, AgentPolicy, PaladinPolicy, RemoteChatPolicy};
use crate::bank::ExemplarBank;
use crate::benchgen::{generate_suite, task_pool, EpisodeCard, SuiteSpec};
use crate::chat::ChatClient;
use crate::seed;
use crate::sim::analysis::analyze;
use crate::sim::grammar::{parse_assistant, render_finish, ParsedAction};
use crate::sim::{
    resume_episode, run_episode, EpisodeSetup, InjectionPlan, Role, SimConfig, SimError, Terminal, ToolRegistry,
    Trajectory, Turn, RECOVERY_PREFIX,
};
use crate::taxonomy::{canonical_key, classify_tool_output, ErrorSignature, FailureContext};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("malformed trace `{id}`: {reason}")]
    MalformedTrace { id: String, reason: String },
    #[error("trace `{0}` contains a failure and must be repaired instead")]
    ContainsFailure(String),
    #[error("teacher failed on `{id}`: {reason}")]
    TeacherFailure { id: String, reason: String },
    #[error("not enough {pool} traces: need {needed}, have {available}")]
    InsufficientTraces { pool: &'static str, needed: usize, available: usize },
    #[error("invalid corpus spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Bench(#[from] crate::benchgen::BenchError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("corpus io: {0}")]
    Io(#[from] std::io::Error),
    #[error("corpus json: {0}")]
    Json(#[from] serde_json::Error),
}

fn malformed(trace: &Trajectory, reason: impl Into<String>) -> PipelineError {
    PipelineError::MalformedTrace { id: trace.episode_id.clone(), reason: reason.into() }
}

/// Checks role ordering: the conversation opens with system or user turns
/// and every function turn answers an assistant turn.
fn check_roles(trace: &Trajectory) -> Result<(), PipelineError> {
    match trace.turns.first().map(|t| t.role) {
        Some(Role::System | Role::User) => {}
        _ => return Err(malformed(trace, "must open with a system or user turn")),
    }
    for (i, pair) in trace.turns.windows(2).enumerate() {
        if pair[1].role == Role::Function && pair[0].role != Role::Assistant {
            return Err(malformed(trace, format!("function turn {} does not follow an assistant turn", i + 1)));
        }
    }
    Ok(())
}

/// Earliest function turn (0-based index into the turn list) whose content
/// classifies as a failure.
pub fn detect_first_failure(trace: &Trajectory) -> Result<Option<(usize, ErrorSignature)>, PipelineError> {
    check_roles(trace)?;
    for (i, turn) in trace.turns.iter().enumerate().filter(|(_, t)| t.role == Role::Function) {
        let tool = trace.turns[i - 1]
            .content
            .lines()
            .find_map(|l| l.strip_prefix("Action:"))
            .map(str::trim)
            .unwrap_or_default()
            .to_string();
        if let Some(sig) = classify_tool_output(&turn.content, FailureContext { tool_name: &tool, turn_index: i }) {
            return Ok(Some((i, sig)));
        }
    }
    Ok(None)
}

/// Keeps turns `0..=turn_index` and clears the terminal state.
pub fn truncate(trace: &Trajectory, turn_index: usize) -> Trajectory {
    Trajectory {
        episode_id: trace.episode_id.clone(),
        turns: trace.turns[..=turn_index.min(trace.turns.len().saturating_sub(1))].to_vec(),
        plan: trace.plan.clone(),
        terminal: None,
    }
}

#[derive(Debug, Clone)]
pub struct RepairRequest {
    pub task: String,
    pub tools: ToolRegistry,
    pub truncated_trace: Trajectory,
    pub error: ErrorSignature,
    pub config: SimConfig,
}

impl RepairRequest {
    /// Truncates `trace` at its first failure; `None` for clean traces.
    pub fn from_trace(trace: &Trajectory, card: &EpisodeCard) -> Result<Option<RepairRequest>, PipelineError> {
        let Some((turn, error)) = detect_first_failure(trace)? else {
            return Ok(None);
        };
        Ok(Some(RepairRequest {
            task: card.prompt.clone(),
            tools: card.tools.clone(),
            truncated_trace: truncate(trace, turn),
            error,
            config: card.config.clone(),
        }))
    }
}

pub enum TeacherBackend<'a> {
    /// Bank scripts rendered through exemplar dialogue templates.
    RuleBased(&'a ExemplarBank),
    Remote(ChatClient),
}

/// Continues the truncated trace with recovery turns.
pub fn repair(request: &RepairRequest, teacher: &TeacherBackend<'_>) -> Result<Trajectory, PipelineError> {
    let prefix = &request.truncated_trace;
    let fail = |reason: String| PipelineError::TeacherFailure { id: prefix.episode_id.clone(), reason };
    let (bank, policy): (Option<&ExemplarBank>, Box<dyn AgentPolicy>) = match teacher {
        TeacherBackend::RuleBased(bank) => {
            let nearest = bank.retrieve(&request.error).ok_or_else(|| fail("empty bank".into()))?;
            let class = nearest.pattern.class(crate::taxonomy::Catalog::shipped());
            if class != Some(request.error.error_class) {
                return Err(fail(format!(
                    "no exemplar of class {} for {}",
                    request.error.error_class, request.error.kind
                )));
            }
            (Some(*bank), Box::new(PaladinPolicy::teacher()))
        }
        TeacherBackend::Remote(client) => (None, Box::new(RemoteChatPolicy::new(client.clone()))),
    };
    let setup = EpisodeSetup {
        episode_id: &prefix.episode_id,
        prompt: &request.task,
        tools: &request.tools,
        plan: &prefix.plan,
        config: &request.config,
        bank,
    };
    let out = resume_episode(setup, prefix, policy.as_ref()).map_err(|e| fail(e.to_string()))?;

    let appended = &out.turns[prefix.turns.len()..];
    if !appended.iter().find(|t| t.role == Role::Assistant).is_some_and(|t| t.is_recovery) {
        return Err(fail("first appended turn is not a recovery turn".into()));
    }
    if !matches!(out.terminal, Some(Terminal::Finished { .. } | Terminal::GracefulFailure { .. })) {
        return Err(fail(format!("ended in {:?}", out.terminal)));
    }
    if let Some(t) = appended.iter().find(|t| t.role == Role::Assistant && parse_assistant(&t.content).is_err()) {
        return Err(fail(format!("appended turn does not parse: {}", t.content)));
    }
    Ok(out)
}

/// Audits a clean trace and completes it with a Finish when it stops early.
pub fn finalize(task: &str, tools: &ToolRegistry, trace: &Trajectory) -> Result<Trajectory, PipelineError> {
    check_roles(trace)?;
    if detect_first_failure(trace)?.is_some() {
        return Err(PipelineError::ContainsFailure(trace.episode_id.clone()));
    }
    if trace.turns.iter().any(|t| t.is_recovery) {
        return Err(malformed(trace, "clean trace carries recovery turns"));
    }
    let mut out = trace.clone();
    if !out.turns.iter().any(|t| t.role == Role::User) {
        return Err(malformed(trace, format!("no user turn for task `{task}`")));
    }
    let mut finished = None;
    for turn in out.turns.iter().filter(|t| t.role == Role::Assistant) {
        let parsed = parse_assistant(&turn.content).map_err(|e| malformed(trace, format!("{e}")))?;
        if let ParsedAction::Finish { answer } = parsed.action {
            finished = Some(answer);
        }
    }
    let last_is_finish = out.turns.last().is_some_and(|t| {
        t.role == Role::Assistant
            && matches!(parse_assistant(&t.content).map(|p| p.action), Ok(ParsedAction::Finish { .. }))
    });
    if let (true, Some(answer)) = (last_is_finish, finished) {
        out.terminal = Some(Terminal::Finished { answer });
        return Ok(out);
    }
    if out.turns.last().is_some_and(|t| t.role == Role::Assistant) {
        out.turns.pop();
    }
    let answer = final_answer(&analyze(&out, tools), tools);
    let at = out.now_ms() + SimConfig::default().turn_cost_ms;
    out.turns.push(Turn::new(Role::Assistant, render_finish(false, "Every step returned data.", &answer), at));
    out.terminal = Some(Terminal::Finished { answer });
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecoverySpan {
    pub turn: usize,
    /// Char offsets into the turn content; `start` skips the prefix and the
    /// whitespace after it.
    pub start: usize,
    pub end: usize,
}

pub fn extract_recovery_spans(trace: &Trajectory) -> Vec<RecoverySpan> {
    trace
        .turns
        .iter()
        .enumerate()
        .filter(|(_, t)| t.is_recovery)
        .map(|(i, t)| {
            let rest = &t.content[RECOVERY_PREFIX.len()..];
            let skipped = rest.chars().take_while(|c| c.is_whitespace()).count();
            RecoverySpan { turn: i, start: RECOVERY_PREFIX.chars().count() + skipped, end: t.content.chars().count() }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub target_size: usize,
    pub recovery_fraction: Ratio<u64>,
    pub seed: u64,
}

impl CorpusSpec {
    pub fn new(target_size: usize, seed: u64) -> Self {
        CorpusSpec { target_size, recovery_fraction: Ratio::new(4, 5), seed }
    }

    /// (recovery, clean) trace counts.
    pub fn split(&self) -> (usize, usize) {
        let n_rec =
            (Ratio::from_integer(self.target_size as u64) * self.recovery_fraction).round().to_integer() as usize;
        (n_rec, self.target_size - n_rec)
    }

    fn validate(&self) -> Result<(), PipelineError> {
        let zero = Ratio::from_integer(0);
        let one = Ratio::from_integer(1);
        if self.recovery_fraction <= zero || self.recovery_fraction >= one {
            return Err(PipelineError::InvalidSpec("recovery_fraction must lie in (0, 1)".into()));
        }
        if self.target_size == 0 {
            return Err(PipelineError::InvalidSpec("target_size must be positive".into()));
        }
        Ok(())
    }
}

/// A repaired trace with the key used for dedup.
#[derive(Debug, Clone)]
pub struct RepairedTrace {
    pub trace: Trajectory,
    pub signature: ErrorSignature,
    pub task: String,
}

impl RepairedTrace {
    fn dedup_key(&self) -> (String, u64) {
        (canonical_key(&self.signature), seed::hash_str(&self.task))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub spec: CorpusSpec,
    pub n_recovery: usize,
    pub n_clean: usize,
    pub recovery_share: String,
    pub duplicates_dropped: usize,
    pub quarantined: usize,
    pub dictionary_version: String,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub traces: Vec<Trajectory>,
    pub manifest: CorpusManifest,
}

impl Corpus {
    pub fn spans(&self) -> BTreeMap<String, Vec<[usize; 3]>> {
        self.traces
            .iter()
            .map(|t| {
                let spans = extract_recovery_spans(t).into_iter().map(|s| [s.turn, s.start, s.end]).collect();
                (t.episode_id.clone(), spans)
            })
            .collect()
    }

    /// Writes `corpus.jsonl`, `spans.json` and `manifest.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), PipelineError> {
        std::fs::create_dir_all(dir)?;
        let mut lines = String::new();
        for t in &self.traces {
            lines.push_str(&t.to_json_line());
            lines.push('\n');
        }
        std::fs::write(dir.join("corpus.jsonl"), lines)?;
        std::fs::write(dir.join("spans.json"), serde_json::to_string_pretty(&self.spans())? + "\n")?;
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&self.manifest)? + "\n")?;
        Ok(())
    }
}

/// Dedups the repaired pool, samples both pools and shuffles the result.
pub fn compose_corpus(
    repaired: &[RepairedTrace],
    clean: &[Trajectory],
    spec: &CorpusSpec,
    dictionary_version: &str,
    quarantined: usize,
) -> Result<Corpus, PipelineError> {
    spec.validate()?;
    let (n_rec, n_clean) = spec.split();
    let mut seen = BTreeSet::new();
    let unique: Vec<&RepairedTrace> = repaired.iter().filter(|r| seen.insert(r.dedup_key())).collect();
    let duplicates_dropped = repaired.len() - unique.len();
    if unique.len() < n_rec {
        return Err(PipelineError::InsufficientTraces { pool: "repaired", needed: n_rec, available: unique.len() });
    }
    if clean.len() < n_clean {
        return Err(PipelineError::InsufficientTraces { pool: "clean", needed: n_clean, available: clean.len() });
    }
    let mut rec: Vec<&Trajectory> = unique.into_iter().map(|r| &r.trace).collect();
    rec.shuffle(&mut seed::rng(seed::mix(spec.seed, 0)));
    let mut cln: Vec<&Trajectory> = clean.iter().collect();
    cln.shuffle(&mut seed::rng(seed::mix(spec.seed, 1)));
    let mut traces: Vec<Trajectory> =
        rec.into_iter().take(n_rec).chain(cln.into_iter().take(n_clean)).cloned().collect();
    traces.shuffle(&mut seed::rng(seed::mix(spec.seed, 2)));
    Ok(Corpus {
        traces,
        manifest: CorpusManifest {
            spec: spec.clone(),
            n_recovery: n_rec,
            n_clean,
            recovery_share: Ratio::new(n_rec, spec.target_size).to_string(),
            duplicates_dropped,
            quarantined,
            dictionary_version: dictionary_version.to_string(),
        },
    })
}

/// A trace the teacher could not repair, kept with the reason.
#[derive(Debug, Clone)]
pub struct Quarantined {
    pub trace: Trajectory,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct CorpusBuild {
    pub corpus: Corpus,
    pub quarantine: Vec<Quarantined>,
}

impl CorpusBuild {
    pub fn write(&self, dir: &Path) -> Result<(), PipelineError> {
        self.corpus.write(dir)?;
        if !self.quarantine.is_empty() {
            let qdir = dir.join("quarantine");
            std::fs::create_dir_all(&qdir)?;
            let mut lines = String::new();
            for q in &self.quarantine {
                lines.push_str(&serde_json::to_string(&serde_json::json!({
                    "reason": q.reason,
                    "trace": serde_json::from_str::<serde_json::Value>(&q.trace.to_json_line())?,
                }))?);
                lines.push('\n');
            }
            std::fs::write(qdir.join("quarantine.jsonl"), lines)?;
        }
        Ok(())
    }
}

fn run_card(card: &EpisodeCard, agent: &dyn AgentPolicy) -> Result<Trajectory, PipelineError> {
    let setup = EpisodeSetup {
        episode_id: &card.episode_id,
        prompt: &card.prompt,
        tools: &card.tools,
        plan: &card.plan,
        config: &card.config,
        bank: None,
    };
    Ok(run_episode(setup, agent)?)
}

/// End to end: simulate failure-truncated and clean traces over the
/// bundled task pool, repair the former, finalize the latter and compose.
pub fn build_corpus(
    spec: &CorpusSpec,
    teacher: &TeacherBackend<'_>,
    bank: &ExemplarBank,
) -> Result<CorpusBuild, PipelineError> {
    spec.validate()?;
    let (n_rec, n_clean) = spec.split();
    let raw_agent = crate::agents::VanillaPolicy::toolbench();

    let fail_spec = SuiteSpec {
        clean_fraction: Ratio::from_integer(0),
        ..SuiteSpec::new((n_rec * 2).max(7), seed::mix(spec.seed, 10))
    };
    let cards = generate_suite(&task_pool(), &fail_spec)?;
    let outcomes: Vec<Result<RepairedTrace, Box<Quarantined>>> = cards
        .par_iter()
        .map(|card| {
            let mut card = card.clone();
            card.episode_id = format!("rec-{}", card.episode_id);
            let raw = run_card(&card, &raw_agent).map_err(|e| {
                Box::new(Quarantined {
                    trace: Trajectory::new(card.episode_id.clone(), card.plan.clone()),
                    reason: e.to_string(),
                })
            })?;
            let quarantine = |reason: String| Box::new(Quarantined { trace: raw.clone(), reason });
            let request = RepairRequest::from_trace(&raw, &card)
                .map_err(|e| quarantine(e.to_string()))?
                .ok_or_else(|| quarantine("no failure observed".into()))?;
            let trace = repair(&request, teacher).map_err(|e| quarantine(e.to_string()))?;
            Ok(RepairedTrace { trace, signature: request.error, task: card.prompt.clone() })
        })
        .collect();
    let mut repaired = Vec::new();
    let mut quarantine = Vec::new();
    for o in outcomes {
        match o {
            Ok(r) => repaired.push(r),
            Err(q) => quarantine.push(*q),
        }
    }

    let pool = task_pool();
    let clean: Vec<Trajectory> = (0..n_clean.max(pool.len()))
        .map(|i| {
            let task = &pool[i % pool.len()];
            let card = EpisodeCard {
                episode_id: format!("clean-{i:04}"),
                task_id: task.task_id.clone(),
                prompt: task.prompt.clone(),
                tools: task.tools.clone(),
                plan: InjectionPlan::clean(seed::mix(spec.seed, 20 + i as u64)),
                config: SimConfig::default(),
                guideline: Default::default(),
            };
            let raw = run_card(&card, &raw_agent)?;
            finalize(&card.prompt, &card.tools, &raw)
        })
        .collect::<Result<_, _>>()?;

    let corpus = compose_corpus(&repaired, &clean, spec, &bank.version, quarantine.len())?;
    Ok(CorpusBuild { corpus, quarantine })
}
