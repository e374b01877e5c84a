//! Coalition valuation, exact Shapley allocation and payments.
//!
//! Support features are the players. A coalition is a bitmask over the
//! support features and always implicitly contains the central agent's
//! features (including the dummy). Every design values contributions so that
//! a positive Shapley value means the feature helped.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bayes::PredictiveDistribution;
use crate::error::{invalid, Error, Result};
use crate::market::AgentRegistry;
use crate::scoring::{gaussian_kl, nll, order_invariant_sum, recursive_update, RecursiveEstimate};

/// Largest number of support features for exact enumeration.
pub const ENUMERATION_CAP: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarketDesign {
    /// Plug-in maximum likelihood predictive scored by NLL.
    MleNll,
    /// Bayesian posterior predictive scored by NLL.
    BlrNll,
    /// KL divergence of the enlarged coalition's predictive from the smaller one.
    BlrKlM,
    /// Information gain of a coalition relative to the central agent's predictive.
    BlrKlV,
}

impl MarketDesign {
    pub const ALL: [MarketDesign; 4] = [
        MarketDesign::MleNll,
        MarketDesign::BlrNll,
        MarketDesign::BlrKlM,
        MarketDesign::BlrKlV,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            MarketDesign::MleNll => "mle_nll",
            MarketDesign::BlrNll => "blr_nll",
            MarketDesign::BlrKlM => "blr_kl_m",
            MarketDesign::BlrKlV => "blr_kl_v",
        }
    }

    pub fn family(&self) -> ModelFamily {
        match self {
            MarketDesign::MleNll => ModelFamily::Frequentist,
            _ => ModelFamily::Bayesian,
        }
    }

    /// Whether central payment always equals total support revenue.
    pub fn is_budget_balanced(&self) -> bool {
        !matches!(self, MarketDesign::BlrKlM)
    }
}

impl fmt::Display for MarketDesign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MarketDesign {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        MarketDesign::ALL
            .into_iter()
            .find(|d| d.name() == norm)
            .ok_or_else(|| {
                invalid(format!(
                    "unknown design '{s}' (expected mle_nll, blr_nll, blr_kl_m or blr_kl_v)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    Bayesian,
    Frequentist,
}

/// Per-step predictives of every coalition, indexed by support bitmask.
#[derive(Debug, Clone, PartialEq)]
pub struct CoalitionCache {
    pub family: ModelFamily,
    central: Vec<usize>,
    support: Vec<usize>,
    targets: Vec<f64>,
    predictives: Vec<PredictiveDistribution>,
}

impl CoalitionCache {
    pub fn new(family: ModelFamily, central: Vec<usize>, support: Vec<usize>) -> Result<Self> {
        if support.len() > ENUMERATION_CAP {
            return Err(Error::Capacity {
                players: support.len(),
                cap: ENUMERATION_CAP,
            });
        }
        if !central.contains(&0) {
            return Err(Error::Configuration(
                "the central agent must own the dummy basis".into(),
            ));
        }
        if support.iter().any(|s| central.contains(s)) {
            return Err(Error::Configuration(
                "central and support features overlap".into(),
            ));
        }
        let mut sorted = support.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != support.len() {
            return Err(Error::Configuration("duplicate support feature".into()));
        }
        Ok(Self {
            family,
            central,
            support,
            targets: Vec::new(),
            predictives: Vec::new(),
        })
    }

    pub fn n_players(&self) -> usize {
        self.support.len()
    }

    pub fn n_masks(&self) -> usize {
        1 << self.support.len()
    }

    pub fn n_steps(&self) -> usize {
        self.targets.len()
    }

    pub fn support(&self) -> &[usize] {
        &self.support
    }

    pub fn central(&self) -> &[usize] {
        &self.central
    }

    pub fn grand_mask(&self) -> usize {
        self.n_masks() - 1
    }

    /// Sorted basis indices of the coalition `C ∪ I_c`.
    pub fn coalition_basis(&self, mask: usize) -> Vec<usize> {
        let mut idx = self.central.clone();
        idx.extend(
            self.support
                .iter()
                .enumerate()
                .filter(|(j, _)| mask >> j & 1 == 1)
                .map(|(_, &s)| s),
        );
        idx.sort_unstable();
        idx
    }

    /// Position of a support basis index among the players.
    pub fn player_of(&self, feature: usize) -> Result<usize> {
        self.support
            .iter()
            .position(|&s| s == feature)
            .ok_or_else(|| invalid(format!("basis index {feature} is not a support feature")))
    }

    /// Bitmask of a set of support basis indices.
    pub fn mask_of(&self, features: &[usize]) -> Result<usize> {
        features
            .iter()
            .try_fold(0usize, |m, &f| Ok(m | (1 << self.player_of(f)?)))
    }

    /// Appends one step: its realised target and one predictive per mask.
    pub fn push_step(&mut self, target: f64, predictives: Vec<PredictiveDistribution>) -> Result<()> {
        if predictives.len() != self.n_masks() {
            return Err(Error::Internal(format!(
                "expected {} coalition predictives, got {}",
                self.n_masks(),
                predictives.len()
            )));
        }
        self.targets.push(target);
        self.predictives.extend(predictives);
        Ok(())
    }

    pub fn clear(&mut self) {
        self.targets.clear();
        self.predictives.clear();
    }

    pub fn target(&self, t: usize) -> Result<f64> {
        self.targets
            .get(t)
            .copied()
            .ok_or_else(|| Error::Internal(format!("no cached step {t}")))
    }

    #[inline]
    pub fn predictive(&self, t: usize, mask: usize) -> Result<&PredictiveDistribution> {
        if t >= self.n_steps() || mask >= self.n_masks() {
            return Err(Error::Internal(format!(
                "no cached predictive for step {t}, coalition {mask:#b}"
            )));
        }
        Ok(&self.predictives[t * self.n_masks() + mask])
    }

    fn step(&self, t: usize) -> Result<(&[PredictiveDistribution], f64)> {
        let y = self.target(t)?;
        let n = self.n_masks();
        Ok((&self.predictives[t * n..(t + 1) * n], y))
    }

    fn check_family(&self, design: MarketDesign) -> Result<()> {
        if design.family() != self.family {
            return Err(invalid(format!(
                "design {design} needs {:?} predictives but the cache holds {:?}",
                design.family(),
                self.family
            )));
        }
        Ok(())
    }
}

/// `v_t(C)` for designs that value coalitions directly.
pub fn per_step_value(
    design: MarketDesign,
    mask: usize,
    t: usize,
    cache: &CoalitionCache,
) -> Result<f64> {
    cache.check_family(design)?;
    let (preds, y) = cache.step(t)?;
    if mask >= preds.len() {
        return Err(Error::Internal(format!("no cached coalition {mask:#b}")));
    }
    value_of(design, preds, y, mask)
}

#[inline]
fn value_of(design: MarketDesign, preds: &[PredictiveDistribution], y: f64, mask: usize) -> Result<f64> {
    match design {
        MarketDesign::MleNll | MarketDesign::BlrNll => Ok(nll(&preds[mask], y)),
        MarketDesign::BlrKlV => Ok(gaussian_kl(&preds[mask], &preds[0])),
        MarketDesign::BlrKlM => Err(Error::UnsupportedDesign(design)),
    }
}

#[inline]
fn marginal_of(
    design: MarketDesign,
    preds: &[PredictiveDistribution],
    y: f64,
    player: usize,
    mask: usize,
) -> f64 {
    let with = mask | (1 << player);
    match design {
        MarketDesign::MleNll | MarketDesign::BlrNll => nll(&preds[mask], y) - nll(&preds[with], y),
        MarketDesign::BlrKlV => {
            gaussian_kl(&preds[with], &preds[0]) - gaussian_kl(&preds[mask], &preds[0])
        }
        MarketDesign::BlrKlM => gaussian_kl(&preds[with], &preds[mask]),
    }
}

/// Contribution of support feature `feature` when added to coalition `mask`.
pub fn marginal_contribution(
    design: MarketDesign,
    feature: usize,
    mask: usize,
    t: usize,
    cache: &CoalitionCache,
) -> Result<f64> {
    cache.check_family(design)?;
    let player = cache.player_of(feature)?;
    if mask >> player & 1 == 1 {
        return Err(invalid(format!("feature {feature} is already in the coalition")));
    }
    let (preds, y) = cache.step(t)?;
    if mask >= preds.len() {
        return Err(Error::Internal(format!("no cached coalition {mask:#b}")));
    }
    Ok(marginal_of(design, preds, y, player, mask))
}

/// Shapley weight per coalition size, `|C|!(n−|C|−1)!/n!`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapleyWeights {
    n: usize,
    table: Vec<f64>,
}

impl ShapleyWeights {
    pub fn standard(n: usize) -> Result<Self> {
        if n > ENUMERATION_CAP {
            return Err(Error::Capacity {
                players: n,
                cap: ENUMERATION_CAP,
            });
        }
        // 1 / (n · C(n−1, s)), with the binomial exact in f64 for n ≤ 20.
        let mut table = Vec::with_capacity(n);
        let mut binom = 1.0f64;
        for s in 0..n {
            table.push(1.0 / (n as f64 * binom));
            binom = binom * (n - 1 - s) as f64 / (s + 1) as f64;
        }
        Ok(Self { n, table })
    }

    /// Arbitrary weights; used to audit the auditor.
    pub fn from_table(table: Vec<f64>) -> Result<Self> {
        if table.len() > ENUMERATION_CAP {
            return Err(Error::Capacity {
                players: table.len(),
                cap: ENUMERATION_CAP,
            });
        }
        Ok(Self {
            n: table.len(),
            table,
        })
    }

    pub fn n_players(&self) -> usize {
        self.n
    }

    pub fn weight(&self, coalition_size: usize) -> f64 {
        self.table[coalition_size]
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }
}

/// Shapley value of every support feature at step `t`, in player order.
pub fn shapley_values(
    design: MarketDesign,
    t: usize,
    cache: &CoalitionCache,
    weights: &ShapleyWeights,
) -> Result<Vec<f64>> {
    cache.check_family(design)?;
    let n = cache.n_players();
    if weights.n_players() != n {
        return Err(invalid(format!(
            "weights are for {} players, cache has {n}",
            weights.n_players()
        )));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let (preds, y) = cache.step(t)?;
    let n_masks = cache.n_masks();
    // Coalition values once per mask where the design has them.
    let values: Option<Vec<f64>> = match design {
        MarketDesign::BlrKlM => None,
        _ => Some(
            (0..n_masks)
                .map(|m| value_of(design, preds, y, m))
                .collect::<Result<_>>()?,
        ),
    };
    let mut terms = Vec::with_capacity(n_masks / 2);
    let mut out = Vec::with_capacity(n);
    for player in 0..n {
        let bit = 1 << player;
        terms.clear();
        for mask in (0..n_masks).filter(|m| m & bit == 0) {
            let m = match &values {
                Some(v) => match design {
                    MarketDesign::BlrKlV => v[mask | bit] - v[mask],
                    _ => v[mask] - v[mask | bit],
                },
                None => marginal_of(design, preds, y, player, mask),
            };
            terms.push(weights.weight(mask.count_ones() as usize) * m);
        }
        out.push(order_invariant_sum(&terms));
    }
    Ok(out)
}

/// Shapley value of one support feature at step `t`.
pub fn shapley(design: MarketDesign, feature: usize, t: usize, cache: &CoalitionCache) -> Result<f64> {
    let player = cache.player_of(feature)?;
    let weights = ShapleyWeights::standard(cache.n_players())?;
    Ok(shapley_values(design, t, cache, &weights)?[player])
}

/// Per-step Shapley values with their recursive expectations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapleyVector {
    /// Support basis indices, in player order.
    pub features: Vec<usize>,
    pub values: Vec<f64>,
    pub expected: Vec<RecursiveEstimate>,
}

impl ShapleyVector {
    pub fn empty(features: Vec<usize>, tau: f64) -> Self {
        let n = features.len();
        Self {
            features,
            values: vec![0.0; n],
            expected: vec![RecursiveEstimate::new(tau); n],
        }
    }

    pub fn expected_values(&self) -> Vec<f64> {
        self.expected.iter().map(|e| e.value).collect()
    }
}

/// Smooths the expected Shapley values with the current step's values.
pub fn update_expected_shapley(
    prev: &ShapleyVector,
    current: &ShapleyVector,
    tau: f64,
) -> Result<ShapleyVector> {
    if prev.features != current.features || prev.expected.len() != current.values.len() {
        return Err(invalid("Shapley vectors cover different features"));
    }
    let expected = prev
        .expected
        .iter()
        .zip(&current.values)
        .map(|(e, &v)| {
            recursive_update(
                RecursiveEstimate {
                    forgetting: tau,
                    ..*e
                },
                v,
            )
        })
        .collect();
    Ok(ShapleyVector {
        features: current.features.clone(),
        values: current.values.clone(),
        expected,
    })
}

/// Per-step objective whose expectation the central agent pays for:
/// `ℓ_{I_c} − ℓ_I` for the NLL designs, the block marginal otherwise.
pub fn central_step_value(design: MarketDesign, t: usize, cache: &CoalitionCache) -> Result<f64> {
    cache.check_family(design)?;
    let (preds, y) = cache.step(t)?;
    let grand = cache.grand_mask();
    Ok(match design {
        MarketDesign::MleNll | MarketDesign::BlrNll => nll(&preds[0], y) - nll(&preds[grand], y),
        MarketDesign::BlrKlM | MarketDesign::BlrKlV => gaussian_kl(&preds[grand], &preds[0]),
    })
}

/// Recursive expectations behind the central payment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveEstimates {
    /// `E[ℓ_C]` per coalition mask.
    pub losses: Vec<RecursiveEstimate>,
    /// Expected block marginal of all support features.
    pub block: RecursiveEstimate,
}

impl ObjectiveEstimates {
    pub fn new(n_masks: usize, tau: f64) -> Self {
        Self {
            losses: vec![RecursiveEstimate::new(tau); n_masks],
            block: RecursiveEstimate::new(tau),
        }
    }

    pub fn absorb(&mut self, design: MarketDesign, t: usize, cache: &CoalitionCache) -> Result<()> {
        let (preds, y) = cache.step(t)?;
        for (e, p) in self.losses.iter_mut().zip(preds) {
            *e = recursive_update(*e, nll(p, y));
        }
        self.block = recursive_update(self.block, central_step_value(design, t, cache)?);
        Ok(())
    }
}

/// `π_c`: the bid times the expected improvement bought from the support agents.
pub fn central_payment(design: MarketDesign, lambda: f64, estimates: &ObjectiveEstimates) -> Result<f64> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(invalid(format!("bid must be nonnegative, got {lambda}")));
    }
    let value = match design {
        MarketDesign::MleNll | MarketDesign::BlrNll => {
            let grand = estimates.losses.len() - 1;
            estimates.losses[0].value - estimates.losses[grand].value
        }
        MarketDesign::BlrKlM | MarketDesign::BlrKlV => estimates.block.value,
    };
    Ok(lambda * value)
}

/// Revenue per support agent, in registry order.
pub fn agent_revenues(
    shapley_expected: &ShapleyVector,
    registry: &AgentRegistry,
    lambda: f64,
) -> Result<Vec<(String, f64)>> {
    let mut revenue: Vec<(String, Vec<f64>)> = registry
        .supports
        .iter()
        .map(|a| (a.id.clone(), Vec::new()))
        .collect();
    for (&feature, e) in shapley_expected.features.iter().zip(&shapley_expected.expected) {
        let owner = registry
            .supports
            .iter()
            .position(|a| a.features.contains(&feature))
            .ok_or_else(|| {
                Error::Configuration(format!("support feature {feature} has no owner"))
            })?;
        revenue[owner].1.push(lambda * e.value);
    }
    Ok(revenue
        .into_iter()
        .map(|(id, parts)| (id, order_invariant_sum(&parts)))
        .collect())
}

/// `π_c − Σ_a π_a`.
pub fn budget_gap(central_payment: f64, revenues: &[(String, f64)]) -> f64 {
    let paid: Vec<f64> = revenues.iter().map(|(_, r)| *r).collect();
    central_payment - order_invariant_sum(&paid)
}

/// Permutation-average Shapley values, for auditing the weighted-subset sum.
pub mod audit {
    use super::*;

    /// Mean marginal contribution of each player over all arrival orders.
    pub fn permutation_shapley(
        design: MarketDesign,
        t: usize,
        cache: &CoalitionCache,
    ) -> Result<Vec<f64>> {
        cache.check_family(design)?;
        let n = cache.n_players();
        if n > 10 {
            return Err(Error::Capacity { players: n, cap: 10 });
        }
        let (preds, y) = cache.step(t)?;
        let mut sums = vec![0.0; n];
        let mut order: Vec<usize> = (0..n).collect();
        let mut count = 0usize;
        let mut visit = |order: &[usize]| {
            let mut mask = 0usize;
            for &p in order {
                sums[p] += marginal_of(design, preds, y, p, mask);
                mask |= 1 << p;
            }
            count += 1;
        };
        heap_permutations(&mut order, &mut visit);
        Ok(sums.into_iter().map(|s| s / count as f64).collect())
    }

    fn heap_permutations(items: &mut [usize], visit: &mut impl FnMut(&[usize])) {
        let n = items.len();
        let mut c = vec![0usize; n];
        visit(items);
        let mut i = 0;
        while i < n {
            if c[i] < i {
                if i % 2 == 0 {
                    items.swap(0, i);
                } else {
                    items.swap(c[i], i);
                }
                visit(items);
                c[i] += 1;
                i = 0;
            } else {
                c[i] = 0;
                i += 1;
            }
        }
    }
}
