//! Market orchestration: agents, feature selection and two-stage clearing.
//!
//! Every arrival `(x_t, y_t)` is cleared twice. The out-of-sample stage
//! scores the forecast made with the posteriors of `t−1`; the in-sample
//! stage then updates the posteriors with the new observation and scores
//! the fitted predictive. Both stages share the coalition models but keep
//! their own expectations and ledgers.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::allocation::{
    agent_revenues, budget_gap, central_payment, central_step_value, shapley_values,
    update_expected_shapley, CoalitionCache, MarketDesign, ModelFamily, ObjectiveEstimates,
    ShapleyVector, ShapleyWeights,
};
use crate::bayes::{
    batch_posterior, flatten_prior, mle_fit, mle_predictive, predictive, predictive_from_parts,
    prior_for_coalition, update_posterior, Basis, Dataset, GaussianBelief, Hypothesis, MleState,
    PredictiveDistribution,
};
use crate::error::{invalid, Error, Result};
use crate::scoring::{nll, order_invariant_mean, order_invariant_sum};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupportAgent {
    pub id: String,
    /// Basis indices owned by the agent.
    pub features: Vec<usize>,
}

/// Ownership of basis functions. The central agent always owns the dummy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentRegistry {
    pub central_id: String,
    pub central: Vec<usize>,
    pub supports: Vec<SupportAgent>,
}

impl AgentRegistry {
    pub fn new(
        central_id: impl Into<String>,
        central: Vec<usize>,
        supports: Vec<(String, Vec<usize>)>,
    ) -> Result<Self> {
        let registry = Self {
            central_id: central_id.into(),
            central,
            supports: supports
                .into_iter()
                .map(|(id, features)| SupportAgent { id, features })
                .collect(),
        };
        registry.validate()?;
        Ok(registry)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.central.contains(&0) {
            return Err(Error::Configuration(
                "the central agent must own the dummy basis (index 0)".into(),
            ));
        }
        let mut all: Vec<usize> = self.central.clone();
        for a in &self.supports {
            if a.id == self.central_id {
                return Err(Error::Configuration(format!(
                    "agent '{}' is both central and support",
                    a.id
                )));
            }
            all.extend(&a.features);
        }
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        if all.len() != n {
            return Err(Error::Configuration(
                "feature ownership sets overlap".into(),
            ));
        }
        let mut ids: Vec<&str> = self.supports.iter().map(|a| a.id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.supports.len() {
            return Err(Error::Configuration("duplicate support agent id".into()));
        }
        Ok(())
    }

    /// Checks that the ownership sets partition all basis functions.
    pub fn check_partition(&self, n_basis: usize) -> Result<()> {
        let mut all: Vec<usize> = self.central.clone();
        for a in &self.supports {
            all.extend(&a.features);
        }
        all.sort_unstable();
        if all != (0..n_basis).collect::<Vec<_>>() {
            return Err(Error::Configuration(format!(
                "ownership does not partition the {n_basis} basis functions"
            )));
        }
        Ok(())
    }

    /// All support basis indices, ascending.
    pub fn support_features(&self) -> Vec<usize> {
        let mut f: Vec<usize> = self.supports.iter().flat_map(|a| a.features.clone()).collect();
        f.sort_unstable();
        f
    }

    pub fn central_features(&self) -> Vec<usize> {
        let mut c = self.central.clone();
        c.sort_unstable();
        c
    }

    pub fn agent_ids(&self) -> Vec<String> {
        self.supports.iter().map(|a| a.id.clone()).collect()
    }

    /// The same registry without the given support features.
    pub fn without(&self, pruned: &[usize]) -> Self {
        let mut r = self.clone();
        for a in &mut r.supports {
            a.features.retain(|f| !pruned.contains(f));
        }
        r
    }

    fn check_against(&self, hypothesis: &Hypothesis) -> Result<()> {
        self.validate()?;
        let n = hypothesis.n_basis();
        if let Some(f) = self
            .central
            .iter()
            .chain(self.supports.iter().flat_map(|a| a.features.iter()))
            .find(|&&f| f >= n)
        {
            return Err(Error::Configuration(format!(
                "basis index {f} is outside the {n} basis functions"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketConfig {
    pub design: MarketDesign,
    pub lambda_in: f64,
    pub lambda_out: f64,
    /// Basis, noise precision, prior precision and forgetting factor.
    pub hypothesis: Hypothesis,
    pub alpha: f64,
    pub seed: u64,
}

impl MarketConfig {
    pub fn tau(&self) -> f64 {
        self.hypothesis.forgetting
    }

    pub fn validate(&self) -> Result<()> {
        self.hypothesis.validate()?;
        for (name, v) in [("lambda_in", self.lambda_in), ("lambda_out", self.lambda_out)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Configuration(format!("{name} must be nonnegative, got {v}")));
            }
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Configuration(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        Ok(())
    }

    fn lambda(&self, stage: Stage) -> f64 {
        match stage {
            Stage::InSample => self.lambda_in,
            Stage::OutOfSample => self.lambda_out,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    InSample,
    OutOfSample,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::InSample => "in_sample",
            Stage::OutOfSample => "out_of_sample",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "in_sample" => Ok(Stage::InSample),
            "out_of_sample" => Ok(Stage::OutOfSample),
            other => Err(invalid(format!("unknown stage '{other}'"))),
        }
    }
}

/// One cleared step of one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub t: usize,
    pub stage: Stage,
    pub design: MarketDesign,
    pub pi_c: f64,
    /// Per-step revenue per support agent, in registry order.
    pub revenues: Vec<(String, f64)>,
    /// `E[φ_i]_t` per support feature, in basis order.
    pub expected_shapley: Vec<f64>,
    /// Shapley values of this step alone.
    pub step_shapley: Vec<f64>,
    /// `E[ℓ_C]_t` per coalition bitmask.
    pub objective: Vec<f64>,
}

impl LedgerRow {
    pub fn budget_gap(&self) -> f64 {
        budget_gap(self.pi_c, &self.revenues)
    }
}

/// Forecasts issued at `t−1` for every coalition, with the realised target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastRecord {
    pub t: usize,
    pub target: f64,
    pub predictives: Vec<PredictiveDistribution>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClearingResult {
    pub design: MarketDesign,
    pub agents: Vec<String>,
    /// Support basis indices, ascending.
    pub features: Vec<usize>,
    pub feature_names: Vec<String>,
    pub in_sample: Vec<LedgerRow>,
    pub out_of_sample: Vec<LedgerRow>,
    pub forecasts: Vec<ForecastRecord>,
    /// Posterior (or point estimate) mean of the grand coalition after each arrival.
    pub grand_means: Vec<Vec<f64>>,
}

impl ClearingResult {
    /// Both ledgers in clearing order: out-of-sample before in-sample for each `t`.
    pub fn rows(&self) -> Vec<&LedgerRow> {
        let mut rows: Vec<&LedgerRow> = self.in_sample.iter().chain(&self.out_of_sample).collect();
        rows.sort_by_key(|r| (r.t, r.stage == Stage::InSample));
        rows
    }

    /// Sum of per-step revenue per agent over a ledger.
    pub fn cumulative_revenues(&self, stage: Stage) -> Vec<(String, f64)> {
        let rows = match stage {
            Stage::InSample => &self.in_sample,
            Stage::OutOfSample => &self.out_of_sample,
        };
        self.agents
            .iter()
            .enumerate()
            .map(|(k, id)| {
                let parts: Vec<f64> = rows.iter().map(|r| r.revenues[k].1).collect();
                (id.clone(), order_invariant_sum(&parts))
            })
            .collect()
    }

    pub fn cumulative_central_payment(&self, stage: Stage) -> f64 {
        let rows = match stage {
            Stage::InSample => &self.in_sample,
            Stage::OutOfSample => &self.out_of_sample,
        };
        order_invariant_sum(&rows.iter().map(|r| r.pi_c).collect::<Vec<_>>())
    }
}

/// Human-readable name of a basis function given the dataset's column names.
pub fn basis_label(basis: &Basis, columns: &[String]) -> String {
    let col = |c: usize| columns.get(c).cloned().unwrap_or_else(|| format!("x{c}"));
    match *basis {
        Basis::Dummy => "dummy".into(),
        Basis::Linear { column } => col(column),
        Basis::Square { column } => format!("{}_sq", col(column)),
    }
}

struct StageAccount {
    stage: Stage,
    cache: CoalitionCache,
    estimates: ObjectiveEstimates,
    shapley: ShapleyVector,
}

impl StageAccount {
    fn new(stage: Stage, family: ModelFamily, registry: &AgentRegistry, tau: f64) -> Result<Self> {
        let support = registry.support_features();
        let cache = CoalitionCache::new(family, registry.central_features(), support.clone())?;
        Ok(Self {
            stage,
            estimates: ObjectiveEstimates::new(cache.n_masks(), tau),
            shapley: ShapleyVector::empty(support, tau),
            cache,
        })
    }

    fn settle(
        &mut self,
        t: usize,
        y: f64,
        predictives: Vec<PredictiveDistribution>,
        config: &MarketConfig,
        registry: &AgentRegistry,
        weights: &ShapleyWeights,
    ) -> Result<LedgerRow> {
        let design = config.design;
        let lambda = config.lambda(self.stage);
        self.cache.clear();
        self.cache.push_step(y, predictives)?;
        self.estimates.absorb(design, 0, &self.cache)?;
        let current = ShapleyVector {
            values: shapley_values(design, 0, &self.cache, weights)?,
            ..self.shapley.clone()
        };
        self.shapley = update_expected_shapley(&self.shapley, &current, config.tau())?;
        let pi_c = central_payment(design, lambda, &self.estimates)?;
        let revenues = agent_revenues(&self.shapley, registry, lambda)?;
        Ok(LedgerRow {
            t,
            stage: self.stage,
            design,
            pi_c,
            revenues,
            expected_shapley: self.shapley.expected_values(),
            step_shapley: current.values,
            objective: self.estimates.losses.iter().map(|e| e.value).collect(),
        })
    }
}

enum Models {
    Bayesian {
        priors: Vec<GaussianBelief>,
        posteriors: Vec<GaussianBelief>,
    },
    Frequentist {
        states: Vec<MleState>,
        fits: Vec<DVector<f64>>,
    },
}

/// Sequential market state for one transaction.
pub struct MarketState {
    config: MarketConfig,
    registry: AgentRegistry,
    coalitions: Vec<Vec<usize>>,
    models: Models,
    weights: ShapleyWeights,
    in_account: StageAccount,
    out_account: StageAccount,
    next_t: usize,
    out_cleared: bool,
    psi: Vec<f64>,
}

impl MarketState {
    pub fn new(config: &MarketConfig, registry: &AgentRegistry) -> Result<Self> {
        config.validate()?;
        registry.check_against(&config.hypothesis)?;
        let family = config.design.family();
        let tau = config.tau();
        let in_account = StageAccount::new(Stage::InSample, family, registry, tau)?;
        let out_account = StageAccount::new(Stage::OutOfSample, family, registry, tau)?;
        let coalitions: Vec<Vec<usize>> = (0..in_account.cache.n_masks())
            .map(|m| in_account.cache.coalition_basis(m))
            .collect();
        let models = match family {
            ModelFamily::Bayesian => {
                let priors = coalitions
                    .iter()
                    .map(|c| prior_for_coalition(c, config.hypothesis.prior_precision))
                    .collect::<Result<Vec<_>>>()?;
                Models::Bayesian {
                    posteriors: priors.clone(),
                    priors,
                }
            }
            ModelFamily::Frequentist => Models::Frequentist {
                states: coalitions.iter().map(|c| MleState::new(c.len(), tau)).collect(),
                fits: coalitions.iter().map(|c| DVector::zeros(c.len())).collect(),
            },
        };
        Ok(Self {
            weights: ShapleyWeights::standard(registry.support_features().len())?,
            config: config.clone(),
            registry: registry.clone(),
            coalitions,
            models,
            in_account,
            out_account,
            next_t: 1,
            out_cleared: false,
            psi: Vec::new(),
        })
    }

    /// Replaces the Shapley weight table. Intended for fault injection.
    pub fn set_weights(&mut self, weights: ShapleyWeights) -> Result<()> {
        if weights.n_players() != self.weights.n_players() {
            return Err(invalid("weight table has the wrong number of players"));
        }
        self.weights = weights;
        Ok(())
    }

    pub fn next_t(&self) -> usize {
        self.next_t
    }

    /// Current posterior of every coalition, indexed by support bitmask.
    pub fn posteriors(&self) -> Option<&[GaussianBelief]> {
        match &self.models {
            Models::Bayesian { posteriors, .. } => Some(posteriors),
            Models::Frequentist { .. } => None,
        }
    }

    /// Mean coefficients of the grand coalition.
    pub fn grand_mean(&self) -> Vec<f64> {
        match &self.models {
            Models::Bayesian { posteriors, .. } => posteriors.last().unwrap().mean.as_slice().to_vec(),
            Models::Frequentist { fits, .. } => fits.last().unwrap().as_slice().to_vec(),
        }
    }

    fn forecasts(&mut self, row: &[f64]) -> Result<Vec<PredictiveDistribution>> {
        let xi = self.config.hypothesis.noise_precision;
        let mut out = Vec::with_capacity(self.coalitions.len());
        for (k, c) in self.coalitions.iter().enumerate() {
            self.config.hypothesis.basis_row_into(row, c, &mut self.psi);
            out.push(match &self.models {
                Models::Bayesian { posteriors, .. } => predictive(&posteriors[k], &self.psi, xi)?,
                Models::Frequentist { fits, .. } => {
                    mle_predictive(fits[k].as_slice(), &self.psi, xi)?
                }
            });
        }
        Ok(out)
    }

    fn absorb(&mut self, row: &[f64], y: f64) -> Result<()> {
        let h = &self.config.hypothesis;
        for (k, c) in self.coalitions.iter().enumerate() {
            h.basis_row_into(row, c, &mut self.psi);
            match &mut self.models {
                Models::Bayesian { priors, posteriors } => {
                    let flat = flatten_prior(&posteriors[k], &priors[k], h.forgetting)?;
                    posteriors[k] = update_posterior(&flat, &self.psi, y, h.noise_precision)?;
                }
                Models::Frequentist { states, fits } => {
                    states[k].update(&self.psi, y);
                    fits[k] = states[k].fit().coefficients;
                }
            }
        }
        Ok(())
    }

    /// Clears one stage of arrival `t` (1-based). The out-of-sample stage of
    /// `t` must precede its in-sample stage; at `t = 1` it is skipped.
    pub fn clear_step(
        &mut self,
        stage: Stage,
        t: usize,
        row: &[f64],
        y: f64,
    ) -> Result<Option<(LedgerRow, Option<ForecastRecord>)>> {
        if t != self.next_t || (stage == Stage::OutOfSample && self.out_cleared) {
            return Err(Error::Sequencing {
                expected: self.next_t,
                got: t,
            });
        }
        if row.len() < self.config.hypothesis.required_columns() {
            return Err(invalid("input row is shorter than the basis requires"));
        }
        match stage {
            Stage::OutOfSample => {
                self.out_cleared = true;
                if t == 1 {
                    return Ok(None);
                }
                let predictives = self.forecasts(row)?;
                let record = ForecastRecord {
                    t,
                    target: y,
                    predictives: predictives.clone(),
                };
                let ledger = self.out_account.settle(
                    t,
                    y,
                    predictives,
                    &self.config,
                    &self.registry,
                    &self.weights,
                )?;
                Ok(Some((ledger, Some(record))))
            }
            Stage::InSample => {
                self.absorb(row, y)?;
                let predictives = self.forecasts(row)?;
                let ledger = self.in_account.settle(
                    t,
                    y,
                    predictives,
                    &self.config,
                    &self.registry,
                    &self.weights,
                )?;
                self.next_t += 1;
                self.out_cleared = false;
                Ok(Some((ledger, None)))
            }
        }
    }
}

fn feature_names(config: &MarketConfig, registry: &AgentRegistry, columns: &[String]) -> Vec<String> {
    registry
        .support_features()
        .iter()
        .map(|&k| basis_label(&config.hypothesis.basis[k], columns))
        .collect()
}

/// Clears every arrival of `data` in order, out-of-sample stage first.
pub fn run_online(data: &Dataset, config: &MarketConfig, registry: &AgentRegistry) -> Result<ClearingResult> {
    let mut state = MarketState::new(config, registry)?;
    if data.n_columns() < config.hypothesis.required_columns() {
        return Err(invalid("dataset has fewer columns than the basis requires"));
    }
    let mut result = ClearingResult {
        design: config.design,
        agents: registry.agent_ids(),
        features: registry.support_features(),
        feature_names: feature_names(config, registry, &data.columns),
        in_sample: Vec::with_capacity(data.len()),
        out_of_sample: Vec::with_capacity(data.len().saturating_sub(1)),
        forecasts: Vec::with_capacity(data.len().saturating_sub(1)),
        grand_means: Vec::with_capacity(data.len()),
    };
    for i in 0..data.len() {
        let t = i + 1;
        let (row, y) = (data.row(i), data.targets[i]);
        if let Some((ledger, record)) = state.clear_step(Stage::OutOfSample, t, row, y)? {
            result.out_of_sample.push(ledger);
            result.forecasts.extend(record);
        }
        if let Some((ledger, _)) = state.clear_step(Stage::InSample, t, row, y)? {
            result.in_sample.push(ledger);
        }
        result.grand_means.push(state.grand_mean());
    }
    Ok(result)
}

/// Rebuilds the out-of-sample ledger from stored forecasts alone.
pub fn rederive_out_of_sample(
    forecasts: &[ForecastRecord],
    config: &MarketConfig,
    registry: &AgentRegistry,
) -> Result<Vec<LedgerRow>> {
    config.validate()?;
    let mut account =
        StageAccount::new(Stage::OutOfSample, config.design.family(), registry, config.tau())?;
    let weights = ShapleyWeights::standard(registry.support_features().len())?;
    forecasts
        .iter()
        .map(|f| account.settle(f.t, f.target, f.predictives.clone(), config, registry, &weights))
        .collect()
}

/// Outcome of feature selection.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub registry: AgentRegistry,
    /// Pruned support basis indices.
    pub pruned: Vec<usize>,
    /// Validation marginal contribution per original support feature.
    pub contributions: Vec<(usize, f64)>,
}

/// Drops support features that do not lower the grand coalition's mean
/// validation NLL, or whose basis output is constant on the training head.
pub fn select_features(
    data: &Dataset,
    registry: &AgentRegistry,
    hypothesis: &Hypothesis,
    validation_fraction: f64,
) -> Result<Selection> {
    if !(validation_fraction > 0.0 && validation_fraction <= 0.5) {
        return Err(invalid(format!(
            "validation fraction must lie in (0, 0.5], got {validation_fraction}"
        )));
    }
    registry.check_against(hypothesis)?;
    let support = registry.support_features();
    if support.is_empty() {
        return Ok(Selection {
            registry: registry.clone(),
            pruned: Vec::new(),
            contributions: Vec::new(),
        });
    }
    let n = data.len();
    let n_val = ((n as f64) * validation_fraction).round() as usize;
    if n_val == 0 || n_val >= n {
        return Err(invalid(format!(
            "{n} rows are too few for a validation fraction of {validation_fraction}"
        )));
    }
    let head = data.slice(0, n - n_val);
    let tail = data.slice(n - n_val, n);
    let mut grand = registry.central_features();
    grand.extend(&support);
    grand.sort_unstable();
    let grand_loss = validation_loss(&head, &tail, &grand, hypothesis)?;

    let mut pruned = Vec::new();
    let mut contributions = Vec::new();
    for &f in &support {
        let column: Vec<f64> = (0..head.len())
            .map(|t| hypothesis.basis[f].eval(head.row(t)))
            .collect();
        let constant = column.iter().all(|&v| v == column[0]);
        let reduced: Vec<usize> = grand.iter().copied().filter(|&k| k != f).collect();
        let m = validation_loss(&head, &tail, &reduced, hypothesis)? - grand_loss;
        contributions.push((f, m));
        if constant || m < 0.0 {
            pruned.push(f);
        }
    }
    if pruned.len() == support.len() {
        log::info!("feature selection pruned every support feature; the market clears with zero payments");
    }
    Ok(Selection {
        registry: registry.without(&pruned),
        pruned,
        contributions,
    })
}

fn validation_loss(head: &Dataset, tail: &Dataset, coalition: &[usize], h: &Hypothesis) -> Result<f64> {
    let prior = prior_for_coalition(coalition, h.prior_precision)?;
    let post = batch_posterior(
        &prior,
        &h.design_matrix(head, coalition)?,
        &head.targets,
        h.noise_precision,
    )?;
    let mut psi = Vec::new();
    let losses = (0..tail.len())
        .map(|t| {
            h.basis_row_into(tail.row(t), coalition, &mut psi);
            predictive(&post, &psi, h.noise_precision).map(|p| nll(&p, tail.targets[t]))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(order_invariant_mean(&losses))
}

/// Uniform-average clearing of one stage against fixed fitted models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub central_payment: f64,
    /// Mean Shapley value per support feature, in basis order.
    pub shapley: Vec<f64>,
    pub revenues: Vec<(String, f64)>,
    pub budget_gap: f64,
    /// Mean NLL of the central agent's own coalition.
    pub central_loss: f64,
    /// Mean NLL of the grand coalition.
    pub grand_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchOutcome {
    pub design: MarketDesign,
    pub in_sample: StageSummary,
    pub out_of_sample: Option<StageSummary>,
}

/// Fits every coalition once on `train` (no forgetting) and clears both
/// stages with expectations taken as plain averages over points: the
/// training points in-sample and the `test` points out-of-sample.
pub fn clear_batch(
    train: &Dataset,
    test: Option<&Dataset>,
    designs: &[MarketDesign],
    hypothesis: &Hypothesis,
    registry: &AgentRegistry,
    lambda_in: f64,
    lambda_out: f64,
) -> Result<Vec<BatchOutcome>> {
    registry.check_against(hypothesis)?;
    if train.is_empty() {
        return Err(invalid("batch clearing needs at least one training point"));
    }
    let mut caches: Vec<(ModelFamily, CoalitionCache, Option<CoalitionCache>)> = Vec::new();
    for family in [ModelFamily::Bayesian, ModelFamily::Frequentist] {
        if designs.iter().any(|d| d.family() == family) {
            let (a, b) = batch_caches(train, test, family, hypothesis, registry)?;
            caches.push((family, a, b));
        }
    }
    let weights = ShapleyWeights::standard(registry.support_features().len())?;
    designs
        .iter()
        .map(|&design| {
            let (_, cin, cout) = caches
                .iter()
                .find(|(f, _, _)| *f == design.family())
                .ok_or_else(|| Error::Internal("missing model family".into()))?;
            Ok(BatchOutcome {
                design,
                in_sample: summarize(design, cin, registry, &weights, lambda_in)?,
                out_of_sample: cout
                    .as_ref()
                    .map(|c| summarize(design, c, registry, &weights, lambda_out))
                    .transpose()?,
            })
        })
        .collect()
}

fn batch_caches(
    train: &Dataset,
    test: Option<&Dataset>,
    family: ModelFamily,
    h: &Hypothesis,
    registry: &AgentRegistry,
) -> Result<(CoalitionCache, Option<CoalitionCache>)> {
    let mut cin = CoalitionCache::new(family, registry.central_features(), registry.support_features())?;
    let mut cout = test.map(|_| cin.clone());
    let coalitions: Vec<Vec<usize>> = (0..cin.n_masks()).map(|m| cin.coalition_basis(m)).collect();
    let xi = h.noise_precision;
    // (mean, covariance) per coalition; MLE has zero covariance.
    let mut fits = Vec::with_capacity(coalitions.len());
    for c in &coalitions {
        match family {
            ModelFamily::Bayesian => {
                let prior = prior_for_coalition(c, h.prior_precision)?;
                let post = batch_posterior(&prior, &h.design_matrix(train, c)?, &train.targets, xi)?;
                fits.push((post.mean, Some(post.covariance)));
            }
            ModelFamily::Frequentist => {
                fits.push((mle_fit(train, c, h)?.coefficients, None));
            }
        }
    }
    let mut psi = Vec::new();
    let mut fill = |cache: &mut CoalitionCache, data: &Dataset| -> Result<()> {
        for t in 0..data.len() {
            let row = data.row(t);
            let preds = coalitions
                .iter()
                .zip(&fits)
                .map(|(c, (mean, cov))| {
                    h.basis_row_into(row, c, &mut psi);
                    match cov {
                        Some(cov) => predictive_from_parts(mean.as_slice(), cov, &psi, xi),
                        None => mle_predictive(mean.as_slice(), &psi, xi),
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            cache.push_step(data.targets[t], preds)?;
        }
        Ok(())
    };
    fill(&mut cin, train)?;
    if let (Some(c), Some(d)) = (cout.as_mut(), test) {
        fill(c, d)?;
    }
    Ok((cin, cout))
}

fn summarize(
    design: MarketDesign,
    cache: &CoalitionCache,
    registry: &AgentRegistry,
    weights: &ShapleyWeights,
    lambda: f64,
) -> Result<StageSummary> {
    let n = cache.n_steps();
    let players = cache.n_players();
    let grand = cache.grand_mask();
    let mut central = Vec::with_capacity(n);
    let mut per_feature = vec![Vec::with_capacity(n); players];
    let mut central_loss = Vec::with_capacity(n);
    let mut grand_loss = Vec::with_capacity(n);
    for t in 0..n {
        central.push(central_step_value(design, t, cache)?);
        for (j, v) in shapley_values(design, t, cache, weights)?.into_iter().enumerate() {
            per_feature[j].push(v);
        }
        let y = cache.target(t)?;
        central_loss.push(nll(cache.predictive(t, 0)?, y));
        grand_loss.push(nll(cache.predictive(t, grand)?, y));
    }
    let shapley: Vec<f64> = per_feature.iter().map(|v| order_invariant_mean(v)).collect();
    let vector = ShapleyVector {
        features: cache.support().to_vec(),
        values: shapley.clone(),
        expected: shapley
            .iter()
            .map(|&v| crate::scoring::RecursiveEstimate::with_value(v, 1.0))
            .collect(),
    };
    let revenues = agent_revenues(&vector, registry, lambda)?;
    let central_payment = lambda * order_invariant_mean(&central);
    Ok(StageSummary {
        budget_gap: budget_gap(central_payment, &revenues),
        central_payment,
        shapley,
        revenues,
        central_loss: order_invariant_mean(&central_loss),
        grand_loss: order_invariant_mean(&grand_loss),
    })
}
