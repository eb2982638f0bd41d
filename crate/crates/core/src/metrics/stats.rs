//! Percentile bootstrap and Pearson correlation.

use rand::Rng;

use super::{aggregate, to_f64, EpisodeGrade, Metric, MetricsError};
use crate::seed;

/// Linear-interpolation percentile of sorted values, `q` in [0, 1].
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of an empty sample");
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile bootstrap over episodes. Each resample draws `n` indices with
/// `gen_range(0..n)` from one ChaCha8 stream seeded with `seed`. Resamples in
/// which the metric is not applicable are skipped; `Ok(None)` when none
/// remain.
pub fn bootstrap_ci(
    grades: &[EpisodeGrade],
    metric: Metric,
    n_resamples: usize,
    confidence: f64,
    seed: u64,
) -> Result<Option<(f64, f64)>, MetricsError> {
    if grades.is_empty() {
        return Err(MetricsError::EmptySuite);
    }
    let n = grades.len();
    let mut rng = seed::rng(seed);
    let mut values = Vec::with_capacity(n_resamples);
    let mut sample = Vec::with_capacity(n);
    for _ in 0..n_resamples {
        sample.clear();
        sample.extend((0..n).map(|_| grades[rng.gen_range(0..n)].clone()));
        if let Some(v) = aggregate(&sample)?.get(metric) {
            values.push(to_f64(v));
        }
    }
    if values.is_empty() {
        return Ok(None);
    }
    values.sort_by(f64::total_cmp);
    let tail = (1.0 - confidence) / 2.0;
    Ok(Some((percentile(&values, tail), percentile(&values, 1.0 - tail))))
}

/// Pearson r of paired series; `None` for mismatched lengths, fewer than two
/// points or a constant series.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}
