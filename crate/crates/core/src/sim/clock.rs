//! Simulated clock and backoff delays. Nothing here sleeps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bank::RecoveryAction;

/// Monotone millisecond clock.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SimClock {
    now_ms: u64,
}

impl SimClock {
    pub fn at(now_ms: u64) -> Self {
        SimClock { now_ms }
    }

    pub fn now_ms(&self) -> u64 {
        self.now_ms
    }

    pub fn advance(&mut self, ms: u64) {
        self.now_ms = self.now_ms.saturating_add(ms);
    }
}

/// Backoff parameters extracted from a `RetryWithBackoff` action.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackoffPolicy {
    pub base_delay_ms: u64,
    pub cap_ms: u64,
    pub respect_retry_after: bool,
}

impl BackoffPolicy {
    pub fn from_action(action: &RecoveryAction) -> Option<Self> {
        match *action {
            RecoveryAction::RetryWithBackoff { base_delay_ms, cap_ms, respect_retry_after, .. } => {
                Some(BackoffPolicy { base_delay_ms, cap_ms, respect_retry_after })
            }
            _ => None,
        }
    }
}

impl Default for BackoffPolicy {
    fn default() -> Self {
        BackoffPolicy {
            base_delay_ms: RecoveryAction::DEFAULT_BASE_DELAY_MS,
            cap_ms: RecoveryAction::DEFAULT_CAP_MS,
            respect_retry_after: true,
        }
    }
}

/// Upper bound of the jitter window: `min(cap, base * 2^(attempt-1))`.
pub fn backoff_ceiling(attempt: u32, policy: &BackoffPolicy) -> u64 {
    let exp = attempt.saturating_sub(1).min(63);
    policy.base_delay_ms.saturating_mul(1u64 << exp).min(policy.cap_ms)
}

/// Delay before retry number `attempt` (1-based). A present Retry-After is
/// adopted verbatim when the policy respects it; otherwise full jitter.
pub fn backoff_delay(attempt: u32, policy: &BackoffPolicy, retry_after_ms: Option<u64>, seed: u64) -> u64 {
    if let (true, Some(after)) = (policy.respect_retry_after, retry_after_ms) {
        return after;
    }
    let ceiling = backoff_ceiling(attempt.max(1), policy);
    ChaCha8Rng::seed_from_u64(seed).gen_range(0..=ceiling)
}

/// Advances `clock` by the backoff delay and returns the new time.
pub fn advance_backoff(
    clock: &mut SimClock,
    attempt: u32,
    policy: &BackoffPolicy,
    retry_after_ms: Option<u64>,
    seed: u64,
) -> u64 {
    clock.advance(backoff_delay(attempt, policy, retry_after_ms, seed));
    clock.now_ms()
}
