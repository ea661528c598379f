//! Rewrite quality metrics.

use crate::llm::UsageSnapshot;

/// Smallest speedup that makes a rewrite productive.
pub const PR_THRESHOLD: f64 = 1.5;

/// Relative slack when comparing against a best known speedup; planner costs
/// drift a little between ANALYZE runs.
pub const MPR_TOLERANCE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("geometric mean of an empty list")]
    EmptyList,
    #[error("speedup {0} is not positive")]
    NonPositive(f64),
}

pub fn is_productive(speedup: f64) -> bool {
    speedup >= PR_THRESHOLD
}

/// Geometric mean, `exp(mean(ln v))`.
pub fn speedup_gm(values: &[f64]) -> Result<f64, MetricError> {
    if values.is_empty() {
        return Err(MetricError::EmptyList);
    }
    if let Some(&v) = values.iter().find(|v| v.is_nan() || **v <= 0.0) {
        return Err(MetricError::NonPositive(v));
    }
    let mean = values.iter().map(|v| v.ln()).sum::<f64>() / values.len() as f64;
    Ok(mean.exp())
}

/// Whether `speedup` matches the best known one within [`MPR_TOLERANCE`].
pub fn is_mpr(speedup: f64, best_known: f64) -> bool {
    speedup >= best_known * (1.0 - MPR_TOLERANCE)
}

pub fn estimate_usd(usage: &UsageSnapshot, price_per_million: f64) -> f64 {
    tokens_usd(usage.total_tokens(), price_per_million)
}

pub fn tokens_usd(tokens: u64, price_per_million: f64) -> f64 {
    tokens as f64 / 1e6 * price_per_million
}
