//! Seeded evaluation suites: uniform per-class fault coverage, held-out
//! generalization suites and the three-attempt reflection protocol.

mod tasks;

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;

use num_rational::Ratio;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bank::{default_script_for_kind, ExemplarBank};
use crate::seed;
use crate::sim::{InjectionPlan, SimConfig, ToolRegistry};
use crate::taxonomy::{Catalog, ErrorClass};

pub use tasks::{task_pool, TaskTemplate, POOL_SIZE};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("task pool exhausted: no unused (task, kind, turn) slot for {0}")]
    PoolExhausted(String),
    #[error("holding out {kinds:?} would leave class {class} without exemplars")]
    HeldOutCoversClass { class: ErrorClass, kinds: Vec<String> },
    #[error("invalid suite spec: {0}")]
    InvalidSpec(String),
    #[error("suite io: {0}")]
    Io(#[from] std::io::Error),
    #[error("suite json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Faults at any call of the task.
    #[default]
    Paladin,
    /// Faults on the first call, three recovery attempts per error.
    ToolReflect,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuiteSpec {
    pub n_episodes: usize,
    pub class_distribution: BTreeMap<ErrorClass, u32>,
    pub clean_fraction: Ratio<u64>,
    #[serde(default)]
    pub held_out_kinds: BTreeSet<String>,
    #[serde(default)]
    pub protocol: Protocol,
    pub master_seed: u64,
}

impl SuiteSpec {
    pub fn new(n_episodes: usize, master_seed: u64) -> Self {
        SuiteSpec {
            n_episodes,
            class_distribution: ErrorClass::ALL.into_iter().map(|c| (c, 1)).collect(),
            clean_fraction: Ratio::new(1, 5),
            held_out_kinds: BTreeSet::new(),
            protocol: Protocol::Paladin,
            master_seed,
        }
    }

    /// The 200-episode suite used for baseline comparisons.
    pub fn standard(master_seed: u64) -> Self {
        SuiteSpec::new(200, master_seed)
    }

    fn validate(&self) -> Result<(), BenchError> {
        if self.n_episodes == 0 {
            return Err(BenchError::InvalidSpec("n_episodes must be positive".into()));
        }
        if self.clean_fraction >= Ratio::from_integer(1) {
            return Err(BenchError::InvalidSpec("clean_fraction must be below 1".into()));
        }
        if self.class_distribution.values().any(|&w| w == 0) {
            return Err(BenchError::InvalidSpec("class weights must be positive".into()));
        }
        let catalog = Catalog::shipped();
        for kind in &self.held_out_kinds {
            if catalog.get(kind).is_none_or(|k| !k.injectable) {
                return Err(BenchError::InvalidSpec(format!("`{kind}` is not an injectable kind")));
            }
        }
        Ok(())
    }

    /// Kinds eligible for injection, grouped by class. Classes without an
    /// eligible kind are dropped.
    fn eligible_kinds(&self) -> BTreeMap<ErrorClass, Vec<String>> {
        let catalog = Catalog::shipped();
        let mut out: BTreeMap<ErrorClass, Vec<String>> = BTreeMap::new();
        for kind in catalog.injectable() {
            if !self.class_distribution.contains_key(&kind.error_class) {
                continue;
            }
            if !self.held_out_kinds.is_empty() && !self.held_out_kinds.contains(&kind.identifier) {
                continue;
            }
            out.entry(kind.error_class).or_default().push(kind.identifier.clone());
        }
        out
    }
}

/// What a grader should expect from a well-behaved agent.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Guideline {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_recovery: Option<String>,
    #[serde(default)]
    pub forbidden: Vec<String>,
}

/// A self-contained evaluation episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeCard {
    pub episode_id: String,
    pub task_id: String,
    pub prompt: String,
    pub tools: ToolRegistry,
    pub plan: InjectionPlan,
    pub config: SimConfig,
    pub guideline: Guideline,
}

impl EpisodeCard {
    pub fn class(&self) -> Option<ErrorClass> {
        self.plan.kind.as_deref().and_then(|k| Catalog::shipped().class_of(k))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteManifest {
    pub spec: SuiteSpec,
    pub mixer: String,
    pub catalog_version: String,
    pub bank_version: String,
    pub n_cards: usize,
    pub n_clean: usize,
    pub class_counts: BTreeMap<ErrorClass, usize>,
}

/// Splits `total` across `weights` proportionally; leftovers go to the
/// largest fractional remainders, ties to the earlier class.
pub fn largest_remainder(total: usize, weights: &BTreeMap<ErrorClass, u32>) -> BTreeMap<ErrorClass, usize> {
    let sum: u64 = weights.values().map(|&w| u64::from(w)).sum();
    if sum == 0 {
        return BTreeMap::new();
    }
    let mut counts: BTreeMap<ErrorClass, usize> = BTreeMap::new();
    let mut remainders = Vec::new();
    for (&class, &w) in weights {
        let exact = total as u64 * u64::from(w);
        counts.insert(class, (exact / sum) as usize);
        remainders.push((exact % sum, class));
    }
    let assigned: usize = counts.values().sum();
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for (_, class) in remainders.into_iter().take(total - assigned) {
        *counts.get_mut(&class).expect("class present") += 1;
    }
    counts
}

fn guideline_for(kind: Option<&str>) -> Guideline {
    let Some(kind) = kind else {
        return Guideline { expected_recovery: None, forbidden: vec!["hallucinated_success".into()] };
    };
    let mut forbidden = vec!["hallucinated_success".to_string()];
    if matches!(kind, "http_401" | "http_403") {
        forbidden.push("retry_after_auth_failure".into());
    }
    Guideline { expected_recovery: default_script_for_kind(kind).first().map(|a| a.name().to_string()), forbidden }
}

fn plan_for(kind: &str, turn_index: u32, episode_seed: u64, rng: &mut impl Rng) -> InjectionPlan {
    let catalog = Catalog::shipped();
    let mut plan = InjectionPlan::single(kind, turn_index, episode_seed);
    if catalog.class_of(kind) == Some(ErrorClass::ReentrantFailure) {
        plan.persistence = rng.gen_range(1..=3);
    }
    if matches!(kind, "http_429" | "http_503") && rng.gen_bool(0.5) {
        plan.retry_after_ms = Some(rng.gen_range(500..=3000));
    }
    plan
}

/// Generates the suite described by `spec` over `pool`.
pub fn generate_suite(pool: &[TaskTemplate], spec: &SuiteSpec) -> Result<Vec<EpisodeCard>, BenchError> {
    spec.validate()?;
    if pool.is_empty() {
        return Err(BenchError::PoolExhausted("an empty pool".into()));
    }
    let eligible = spec.eligible_kinds();
    let weights: BTreeMap<ErrorClass, u32> =
        spec.class_distribution.iter().filter(|(c, _)| eligible.contains_key(c)).map(|(&c, &w)| (c, w)).collect();
    let n_clean = (Ratio::from_integer(spec.n_episodes as u64) * spec.clean_fraction).to_integer() as usize;
    let n_fail = spec.n_episodes - n_clean;
    if n_fail > 0 && weights.is_empty() {
        return Err(BenchError::InvalidSpec("no injectable kind matches the class distribution".into()));
    }

    let mut slots: Vec<Option<ErrorClass>> = vec![None; n_clean];
    for (class, count) in largest_remainder(n_fail, &weights) {
        slots.extend(std::iter::repeat_n(Some(class), count));
    }
    slots.shuffle(&mut seed::rng(spec.master_seed));

    let hashes: Vec<u64> = pool.iter().map(TaskTemplate::hash).collect();
    let mut used: BTreeSet<(u64, Option<String>, u32)> = BTreeSet::new();
    let mut cards = Vec::with_capacity(spec.n_episodes);
    for (idx, slot) in slots.into_iter().enumerate() {
        let episode_seed = seed::mix(spec.master_seed, idx as u64);
        let mut rng = seed::rng(episode_seed);
        let kind = slot.map(|class| {
            let kinds = &eligible[&class];
            kinds[rng.gen_range(0..kinds.len())].clone()
        });
        let mut candidates = Vec::new();
        for (t, task) in pool.iter().enumerate() {
            let turns: Vec<u32> = match (&kind, spec.protocol) {
                (None, _) | (Some(_), Protocol::ToolReflect) => vec![1],
                (Some(_), Protocol::Paladin) => (1..=task.n_steps() as u32).collect(),
            };
            for turn in turns {
                if !used.contains(&(hashes[t], kind.clone(), turn)) {
                    candidates.push((t, turn));
                }
            }
        }
        if candidates.is_empty() {
            return Err(BenchError::PoolExhausted(kind.unwrap_or_else(|| "a clean episode".into())));
        }
        let (t, turn) = candidates[rng.gen_range(0..candidates.len())];
        used.insert((hashes[t], kind.clone(), turn));
        let task = &pool[t];
        let plan = match &kind {
            Some(k) => plan_for(k, turn, episode_seed, &mut rng),
            None => InjectionPlan::clean(episode_seed),
        };
        let config = SimConfig { rng_seed: spec.master_seed, retry_budget_per_error: 3, ..SimConfig::default() };
        cards.push(EpisodeCard {
            episode_id: format!("ep-{idx:04}"),
            task_id: task.task_id.clone(),
            prompt: task.prompt.clone(),
            tools: task.tools.clone(),
            guideline: guideline_for(kind.as_deref()),
            plan,
            config,
        });
    }
    Ok(cards)
}

/// The bank agents may see when `held_out` kinds are evaluated, plus the
/// suite injecting only those kinds.
pub fn generalization_split(
    pool: &[TaskTemplate],
    spec: &SuiteSpec,
    bank: &ExemplarBank,
) -> Result<(ExemplarBank, Vec<EpisodeCard>), BenchError> {
    let catalog = Catalog::shipped();
    for class in ErrorClass::ALL {
        let all: BTreeSet<String> = catalog.kinds_of_class(class).map(|k| k.identifier.clone()).collect();
        if !spec.held_out_kinds.is_empty() && all.is_subset(&spec.held_out_kinds) {
            return Err(BenchError::HeldOutCoversClass { class, kinds: spec.held_out_kinds.iter().cloned().collect() });
        }
    }
    let visible = bank.without_kinds(&spec.held_out_kinds);
    if let Some(class) = visible.uncovered_classes(catalog).into_iter().next() {
        return Err(BenchError::HeldOutCoversClass { class, kinds: spec.held_out_kinds.iter().cloned().collect() });
    }
    Ok((visible, generate_suite(pool, spec)?))
}

pub fn manifest(spec: &SuiteSpec, cards: &[EpisodeCard], bank: &ExemplarBank) -> SuiteManifest {
    let mut class_counts = BTreeMap::new();
    for class in cards.iter().filter_map(EpisodeCard::class) {
        *class_counts.entry(class).or_insert(0) += 1;
    }
    SuiteManifest {
        spec: spec.clone(),
        mixer: seed::MIXER.to_string(),
        catalog_version: Catalog::shipped().version.clone(),
        bank_version: bank.version.clone(),
        n_cards: cards.len(),
        n_clean: cards.iter().filter(|c| c.plan.is_clean()).count(),
        class_counts,
    }
}

pub fn write_suite(path: &Path, cards: &[EpisodeCard]) -> Result<(), BenchError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for card in cards {
        serde_json::to_writer(&mut out, card)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_suite(path: &Path) -> Result<Vec<EpisodeCard>, BenchError> {
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut cards = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            cards.push(serde_json::from_str(&line)?);
        }
    }
    Ok(cards)
}

#[cfg(test)]
mod tests;
