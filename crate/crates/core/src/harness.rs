//! Runs a suite of episode cards through one agent on a bounded thread pool.

use rayon::prelude::*;
use thiserror::Error;

use crate::agents::AgentPolicy;
use crate::bank::ExemplarBank;
use crate::benchgen::EpisodeCard;
use crate::metrics::{grade_episode, EpisodeGrade, MetricsError};
use crate::sim::{run_episode, EpisodeSetup, SimError, Trajectory};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("episode `{id}`: {source}")]
    Sim { id: String, source: SimError },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("thread pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone)]
pub struct RunOptions<'a> {
    /// `None` disables retrieval for every episode.
    pub bank: Option<&'a ExemplarBank>,
    pub jobs: usize,
    /// Replaces each card's `config.rng_seed` when set.
    pub seed: Option<u64>,
}

/// Trajectories and grades in card order.
#[derive(Debug, Clone)]
pub struct SuiteRun {
    pub trajectories: Vec<Trajectory>,
    pub grades: Vec<EpisodeGrade>,
}

pub fn run_card(
    card: &EpisodeCard,
    agent: &dyn AgentPolicy,
    options: &RunOptions<'_>,
) -> Result<Trajectory, HarnessError> {
    let mut config = card.config.clone();
    if let Some(seed) = options.seed {
        config.rng_seed = seed;
    }
    let setup = EpisodeSetup {
        episode_id: &card.episode_id,
        prompt: &card.prompt,
        tools: &card.tools,
        plan: &card.plan,
        config: &config,
        bank: options.bank,
    };
    run_episode(setup, agent).map_err(|source| HarnessError::Sim { id: card.episode_id.clone(), source })
}

pub fn run_suite(
    cards: &[EpisodeCard],
    agent: &dyn AgentPolicy,
    options: &RunOptions<'_>,
) -> Result<SuiteRun, HarnessError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.jobs.max(1))
        .build()
        .map_err(|e| HarnessError::Pool(e.to_string()))?;
    let results: Vec<Result<(Trajectory, EpisodeGrade), HarnessError>> = pool.install(|| {
        cards
            .par_iter()
            .map(|card| {
                let trace = run_card(card, agent, options)?;
                let grade = grade_episode(&trace, card)?;
                Ok((trace, grade))
            })
            .collect()
    });
    let mut run = SuiteRun { trajectories: Vec::with_capacity(cards.len()), grades: Vec::with_capacity(cards.len()) };
    for r in results {
        let (t, g) = r?;
        run.trajectories.push(t);
        run.grades.push(g);
    }
    Ok(run)
}
