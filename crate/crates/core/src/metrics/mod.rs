//! Rule-based grading, suite aggregation and report output.

mod remote;
mod stats;

use std::collections::BTreeMap;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::agents::scalar_text;
use crate::benchgen::EpisodeCard;
use crate::sim::analysis::analyze;
use crate::sim::{Terminal, Trajectory};

pub use remote::{RemoteGrader, RemoteVerdict};
pub use stats::{bootstrap_ci, pearson, percentile};

/// Phrases through which a final answer admits that something went wrong.
const ACKNOWLEDGEMENTS: [&str; 4] = ["fail", "unable", "could not", "error"];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("trace `{trace}` does not belong to card `{card}`")]
    EpisodeMismatch { trace: String, card: String },
    #[error("no grades to aggregate")]
    EmptySuite,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeGrade {
    pub episode_id: String,
    /// Error class of the injected fault; `None` for clean episodes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
    pub task_success: bool,
    pub failures_encountered: u32,
    pub failures_recovered: u32,
    pub hallucinated_success: bool,
    pub steps_taken: u32,
}

/// True when `answer` contains every scalar value of the JSON `response`.
fn answer_mentions(answer: &str, response: &str) -> bool {
    match serde_json::from_str::<Value>(response) {
        Ok(Value::Object(map)) => map.values().filter_map(scalar_text).all(|v| answer.contains(&v)),
        _ => answer.contains(response.trim()),
    }
}

fn acknowledges_failure(answer: &str) -> bool {
    let lower = answer.to_lowercase();
    ACKNOWLEDGEMENTS.iter().any(|p| lower.contains(p))
}

pub fn grade_episode(trace: &Trajectory, card: &EpisodeCard) -> Result<EpisodeGrade, MetricsError> {
    if trace.episode_id != card.episode_id {
        return Err(MetricsError::EpisodeMismatch { trace: trace.episode_id.clone(), card: card.episode_id.clone() });
    }
    let analysis = analyze(trace, &card.tools);

    let mut encountered = 0u32;
    let mut recovered = 0u32;
    for incident in &analysis.incidents {
        let n = incident.kinds().len() as u32;
        encountered += n;
        if incident.resolved {
            recovered += n;
        }
    }
    let mut protocol_unrecovered = false;
    for event in analysis.protocol_events.iter().filter(|e| e.failure.is_some()) {
        encountered += 1;
        if analysis.calls.iter().any(|c| c.assistant_turn > event.assistant_turn && c.succeeded()) {
            recovered += 1;
        } else {
            protocol_unrecovered = true;
        }
    }
    let unrecovered = analysis.unresolved_incidents().next().is_some() || protocol_unrecovered;

    let (task_success, hallucinated_success) = match &trace.terminal {
        Some(Terminal::Finished { answer }) => {
            let steps = card.tools.steps();
            let all_done = steps.iter().all(|s| analysis.completed.contains_key(*s));
            let referenced = steps.iter().all(|s| {
                analysis
                    .completed_output(s)
                    .and_then(|c| c.response.as_deref())
                    .is_some_and(|r| answer_mentions(answer, r))
            });
            (all_done && referenced, unrecovered && !acknowledges_failure(answer))
        }
        _ => (false, false),
    };

    Ok(EpisodeGrade {
        episode_id: card.episode_id.clone(),
        class: card.class().map(|c| c.as_str().to_string()),
        task_success,
        failures_encountered: encountered,
        failures_recovered: recovered,
        hallucinated_success,
        steps_taken: trace.assistant_turns().max(1) as u32,
    })
}

/// Exact suite-level rates. `rr` and `csr` are `None` when the suite
/// contains no failures.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuiteMetrics {
    pub n_episodes: u64,
    pub tsr: Ratio<u64>,
    pub rr: Option<Ratio<u64>>,
    pub csr: Option<Ratio<u64>>,
    pub es: Ratio<u64>,
}

impl SuiteMetrics {
    /// `tsr − alpha·(1 − csr)`; no penalty when csr is not applicable.
    pub fn composite(&self, alpha: Ratio<i64>) -> Ratio<i64> {
        let to_signed = |r: Ratio<u64>| Ratio::new(*r.numer() as i64, *r.denom() as i64);
        let csr = self.csr.map(to_signed).unwrap_or(Ratio::from_integer(1));
        to_signed(self.tsr) - alpha * (Ratio::from_integer(1) - csr)
    }

    pub fn get(&self, metric: Metric) -> Option<Ratio<u64>> {
        match metric {
            Metric::Tsr => Some(self.tsr),
            Metric::Rr => self.rr,
            Metric::Csr => self.csr,
            Metric::Es => Some(self.es),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Tsr,
    Rr,
    Csr,
    Es,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Tsr, Metric::Rr, Metric::Csr, Metric::Es];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Tsr => "tsr",
            Metric::Rr => "rr",
            Metric::Csr => "csr",
            Metric::Es => "es",
        }
    }
}

pub fn aggregate(grades: &[EpisodeGrade]) -> Result<SuiteMetrics, MetricsError> {
    if grades.is_empty() {
        return Err(MetricsError::EmptySuite);
    }
    let n = grades.len() as u64;
    let successes = grades.iter().filter(|g| g.task_success).count() as u64;
    let encountered: u64 = grades.iter().map(|g| u64::from(g.failures_encountered)).sum();
    let recovered: u64 = grades.iter().map(|g| u64::from(g.failures_recovered)).sum();
    let hallucinated = grades.iter().filter(|g| g.hallucinated_success).count() as u64;
    let steps: u64 = grades.iter().map(|g| u64::from(g.steps_taken)).sum();
    let (rr, csr) = if encountered == 0 {
        (None, None)
    } else {
        (Some(Ratio::new(recovered, encountered)), Some(Ratio::from_integer(1) - Ratio::new(hallucinated, encountered)))
    };
    Ok(SuiteMetrics { n_episodes: n, tsr: Ratio::new(successes, n), rr, csr, es: Ratio::new(n, steps.max(1)) })
}

pub fn to_f64<T: Into<i128> + Copy>(r: Ratio<T>) -> f64 {
    let n: i128 = (*r.numer()).into();
    let d: i128 = (*r.denom()).into();
    n as f64 / d as f64
}

/// One flat report row; `point` is `None` for not-applicable metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exact: Option<String>,
    pub point: Option<f64>,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub suite: String,
    pub agent: String,
    pub n_episodes: u64,
    pub alpha: String,
    pub composite: String,
    pub metrics: Vec<MetricRow>,
    pub per_class: BTreeMap<String, Vec<MetricRow>>,
    pub n_resamples: usize,
    pub confidence: f64,
    pub correlations: BTreeMap<String, Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportConfig {
    pub alpha: Ratio<i64>,
    pub n_resamples: usize,
    pub confidence: f64,
    pub seed: u64,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig { alpha: Ratio::from_integer(1), n_resamples: 1000, confidence: 0.95, seed: 0 }
    }
}

fn rows(metrics: &SuiteMetrics, grades: &[EpisodeGrade], config: &ReportConfig, with_ci: bool) -> Vec<MetricRow> {
    Metric::ALL
        .into_iter()
        .map(|m| {
            let value = metrics.get(m);
            let point = value.map(to_f64);
            let ci = match (with_ci, point) {
                (true, Some(p)) => bootstrap_ci(grades, m, config.n_resamples, config.confidence, config.seed)
                    .ok()
                    .flatten()
                    .map(|(lo, hi)| (lo.min(p), hi.max(p))),
                _ => None,
            };
            MetricRow {
                metric: m.as_str().to_string(),
                exact: value.map(|r| r.to_string()),
                point,
                ci_lo: ci.map(|c| c.0),
                ci_hi: ci.map(|c| c.1),
            }
        })
        .collect()
}

/// Per-episode series used for correlations.
fn correlations(grades: &[EpisodeGrade]) -> BTreeMap<String, Option<f64>> {
    let failing: Vec<&EpisodeGrade> = grades.iter().filter(|g| g.failures_encountered > 0).collect();
    let success = |g: &&EpisodeGrade| if g.task_success { 1.0 } else { 0.0 };
    let recovery = |g: &&EpisodeGrade| f64::from(g.failures_recovered) / f64::from(g.failures_encountered);
    let safe = |g: &&EpisodeGrade| if g.hallucinated_success { 0.0 } else { 1.0 };
    let efficiency = |g: &EpisodeGrade| 1.0 / f64::from(g.steps_taken);
    let s: Vec<f64> = failing.iter().map(success).collect();
    let r: Vec<f64> = failing.iter().map(recovery).collect();
    let c: Vec<f64> = failing.iter().map(safe).collect();
    let all_s: Vec<f64> = grades.iter().map(|g| if g.task_success { 1.0 } else { 0.0 }).collect();
    let all_e: Vec<f64> = grades.iter().map(efficiency).collect();
    BTreeMap::from([
        ("tsr~rr".to_string(), pearson(&s, &r)),
        ("csr~rr".to_string(), pearson(&c, &r)),
        ("tsr~es".to_string(), pearson(&all_s, &all_e)),
    ])
}

pub fn build_report(
    suite: &str,
    agent: &str,
    grades: &[EpisodeGrade],
    config: &ReportConfig,
) -> Result<MetricsReport, MetricsError> {
    let metrics = aggregate(grades)?;
    let mut by_class: BTreeMap<String, Vec<EpisodeGrade>> = BTreeMap::new();
    for g in grades {
        by_class.entry(g.class.clone().unwrap_or_else(|| "clean".into())).or_default().push(g.clone());
    }
    let per_class = by_class
        .into_iter()
        .map(|(class, gs)| {
            let m = aggregate(&gs).expect("group is non-empty");
            (class, rows(&m, &gs, config, false))
        })
        .collect();
    Ok(MetricsReport {
        suite: suite.to_string(),
        agent: agent.to_string(),
        n_episodes: metrics.n_episodes,
        alpha: config.alpha.to_string(),
        composite: metrics.composite(config.alpha).to_string(),
        metrics: rows(&metrics, grades, config, true),
        per_class,
        n_resamples: config.n_resamples,
        confidence: config.confidence,
        correlations: correlations(grades),
    })
}

impl MetricsReport {
    pub fn point(&self, metric: Metric) -> Option<f64> {
        self.metrics.iter().find(|r| r.metric == metric.as_str()).and_then(|r| r.point)
    }

    /// `suite,agent,metric,point,ci_lo,ci_hi`; empty cells for N/A.
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut out = String::from("suite,agent,metric,point,ci_lo,ci_hi\n");
        for row in &self.metrics {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                self.suite,
                self.agent,
                row.metric,
                cell(row.point),
                cell(row.ci_lo),
                cell(row.ci_hi)
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests;
