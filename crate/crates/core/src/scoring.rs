//! Scores over predictive distributions and revenue risk metrics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bayes::PredictiveDistribution;
use crate::error::{invalid, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Negative log predictive density of `y`.
#[inline]
pub fn nll(pred: &PredictiveDistribution, y: f64) -> f64 {
    let r = y - pred.mean;
    0.5 * (LN_2PI - pred.precision.ln() + pred.precision * r * r)
}

/// `KL(p ‖ q)` between two univariate Gaussians given by mean and precision.
///
/// Written as `½((r−1) − ln(1 + (r−1)) + ξ_q Δ²)` with `r = ξ_q/ξ_p`, which
/// is exactly `(ξ/2)Δ²` when the precisions agree and never negative.
#[inline]
pub fn gaussian_kl(p: &PredictiveDistribution, q: &PredictiveDistribution) -> f64 {
    let d = p.mean - q.mean;
    let x = q.precision / p.precision - 1.0;
    let spread = (x - x.ln_1p()).max(0.0);
    0.5 * (spread + q.precision * d * d)
}

/// Exponential-forgetting estimate of an expectation.
///
/// The first absorbed value initialises the estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecursiveEstimate {
    pub value: f64,
    pub forgetting: f64,
    pub steps: u64,
}

impl RecursiveEstimate {
    pub fn new(forgetting: f64) -> Self {
        Self {
            value: 0.0,
            forgetting,
            steps: 0,
        }
    }

    /// An estimate that has already absorbed at least one value.
    pub fn with_value(value: f64, forgetting: f64) -> Self {
        Self {
            value,
            forgetting,
            steps: 1,
        }
    }

    pub fn is_initialised(&self) -> bool {
        self.steps > 0
    }
}

/// `(1−τ)·current + τ·previous`, or `current` on the first step.
pub fn recursive_update(prev: RecursiveEstimate, current_value: f64) -> RecursiveEstimate {
    let tau = prev.forgetting;
    let value = if prev.steps == 0 {
        current_value
    } else if tau == 1.0 {
        prev.value
    } else if tau == 0.0 {
        current_value
    } else {
        (1.0 - tau) * current_value + tau * prev.value
    };
    RecursiveEstimate {
        value,
        forgetting: tau,
        steps: prev.steps + 1,
    }
}

/// Sum that does not depend on the order of `values`.
///
/// Values are sorted by total order and summed pairwise.
pub fn order_invariant_sum(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    pairwise_sum(&v)
}

pub fn order_invariant_mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    order_invariant_sum(values) / values.len() as f64
}

fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 8 {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

fn tail_count(n: usize, alpha: f64) -> usize {
    // The small offset keeps αN that is integral up to rounding from rounding up.
    (((alpha * n as f64) - 1e-9).ceil() as usize).clamp(1, n)
}

/// Negated mean of the `⌈αN⌉` smallest samples.
pub fn expected_shortfall(samples: &[f64], alpha: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(invalid("expected shortfall of an empty sample"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(invalid(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(sorted_shortfall(&v, alpha))
}

fn sorted_shortfall(sorted: &[f64], alpha: f64) -> f64 {
    let k = tail_count(sorted.len(), alpha);
    -pairwise_sum(&sorted[..k]) / k as f64
}

/// Statistic whose sampling spread a confidence interval describes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Statistic {
    Mean,
    ExpectedShortfall { alpha: f64 },
}

impl Statistic {
    pub fn evaluate(&self, samples: &[f64]) -> Result<f64> {
        match *self {
            Statistic::Mean => {
                if samples.is_empty() {
                    return Err(invalid("mean of an empty sample"));
                }
                Ok(order_invariant_mean(samples))
            }
            Statistic::ExpectedShortfall { alpha } => expected_shortfall(samples, alpha),
        }
    }
}

pub const SUBSAMPLE_RESAMPLES: usize = 500;
pub const MIN_SUBSAMPLE_SIZE: usize = 20;

/// Two-sided interval from the statistic over half-size subsamples drawn
/// without replacement.
pub fn subsample_confidence_interval(
    samples: &[f64],
    statistic: Statistic,
    level: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    if samples.len() < MIN_SUBSAMPLE_SIZE {
        return Err(invalid(format!(
            "subsampling needs at least {MIN_SUBSAMPLE_SIZE} samples, got {}",
            samples.len()
        )));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(invalid(format!("level must lie in (0, 1), got {level}")));
    }
    if let Statistic::ExpectedShortfall { alpha } = statistic {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(invalid(format!("alpha must lie in (0, 1), got {alpha}")));
        }
    }
    let n = samples.len();
    let m = n / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = Vec::with_capacity(SUBSAMPLE_RESAMPLES);
    let mut sub = Vec::with_capacity(m);
    for _ in 0..SUBSAMPLE_RESAMPLES {
        sub.clear();
        sub.extend(
            rand::seq::index::sample(&mut rng, n, m)
                .into_iter()
                .map(|i| samples[i]),
        );
        sub.sort_by(f64::total_cmp);
        stats.push(match statistic {
            Statistic::Mean => pairwise_sum(&sub) / m as f64,
            Statistic::ExpectedShortfall { alpha } => sorted_shortfall(&sub, alpha),
        });
    }
    stats.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok((quantile_sorted(&stats, tail), quantile_sorted(&stats, 1.0 - tail)))
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let w = h - lo as f64;
    if w == 0.0 {
        sorted[lo]
    } else {
        sorted[lo] + w * (sorted[hi] - sorted[lo])
    }
}

/// Revenue distribution summary for one agent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub expected_value: f64,
    pub expected_shortfall: f64,
    pub alpha: f64,
    /// Interval for the expected value, absent below the subsampling minimum.
    pub confidence_interval: Option<(f64, f64)>,
    pub shortfall_interval: Option<(f64, f64)>,
}

impl RiskReport {
    pub fn from_samples(samples: &[f64], alpha: f64, level: f64, seed: u64) -> Result<Self> {
        let expected_value = Statistic::Mean.evaluate(samples)?;
        let expected_shortfall = expected_shortfall(samples, alpha)?;
        let (confidence_interval, shortfall_interval) = if samples.len() >= MIN_SUBSAMPLE_SIZE {
            (
                Some(subsample_confidence_interval(samples, Statistic::Mean, level, seed)?),
                Some(subsample_confidence_interval(
                    samples,
                    Statistic::ExpectedShortfall { alpha },
                    level,
                    seed.wrapping_add(1),
                )?),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            expected_value,
            expected_shortfall,
            alpha,
            confidence_interval,
            shortfall_interval,
        })
    }
}
