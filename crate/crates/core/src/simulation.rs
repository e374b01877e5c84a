//! Synthetic setups and the Monte Carlo harness.
//!
//! Features are i.i.d. standard normal. The target is built from the true
//! coefficients `w = [w_0, w_1, …]` where `w_0` multiplies the dummy. Feature
//! draws and noise draws come from separate ChaCha streams of the same seed,
//! so every setup sees the same inputs for a given seed.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal, StudentT};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocation::MarketDesign;
use crate::bayes::{
    flatten_prior, prior_for_coalition, solve_normal_equations, update_posterior, Dataset,
    Hypothesis,
};
use crate::error::{invalid, Error, Result};
use crate::market::{clear_batch, AgentRegistry, BatchOutcome, StageSummary};
use crate::scoring::{order_invariant_mean, RiskReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetupKind {
    /// Well-specified linear model with Gaussian noise.
    Baseline,
    /// Target depends on squared features; the model stays linear.
    Interpolant,
    /// Interpolant with heavy-tailed Student-t(2) noise.
    Noise,
    /// Noise setup with noise scaled by the square of the second feature.
    Heteroskedasticity,
}

impl SetupKind {
    pub const ALL: [SetupKind; 4] = [
        SetupKind::Baseline,
        SetupKind::Interpolant,
        SetupKind::Noise,
        SetupKind::Heteroskedasticity,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            SetupKind::Baseline => "baseline",
            SetupKind::Interpolant => "interpolant",
            SetupKind::Noise => "noise",
            SetupKind::Heteroskedasticity => "heteroskedasticity",
        }
    }
}

impl fmt::Display for SetupKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SetupKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase();
        SetupKind::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| {
                invalid(format!(
                    "unknown setup '{s}' (expected baseline, interpolant, noise or heteroskedasticity)"
                ))
            })
    }
}

/// Time variation of the coefficient `w_2`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Nonstationarity {
    #[default]
    None,
    /// Moves linearly from its initial value to `to` over the sample.
    LinearDrift { to: f64 },
    /// Jumps to `to` from step `at` (0-based row) onwards.
    Step { at: usize, to: f64 },
}

pub const DEFAULT_CLIP: f64 = 50.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetupSpec {
    pub kind: SetupKind,
    pub true_w: Vec<f64>,
    pub xi: f64,
    pub n_samples: usize,
    pub seed: u64,
    #[serde(default)]
    pub nonstationarity: Nonstationarity,
    /// Heavy-tailed draws are clipped at `±clip/√ξ`.
    #[serde(default = "default_clip")]
    pub clip: f64,
    /// Selects an independent pair of random streams for the same seed.
    #[serde(default)]
    pub stream: u64,
}

fn default_clip() -> f64 {
    DEFAULT_CLIP
}

impl SetupSpec {
    pub fn new(kind: SetupKind, true_w: Vec<f64>, xi: f64, n_samples: usize, seed: u64) -> Self {
        Self {
            kind,
            true_w,
            xi,
            n_samples,
            seed,
            nonstationarity: Nonstationarity::None,
            clip: DEFAULT_CLIP,
            stream: 0,
        }
    }

    pub fn n_features(&self) -> usize {
        self.true_w.len().saturating_sub(1)
    }

    fn validate(&self) -> Result<()> {
        if self.true_w.len() < 2 {
            return Err(invalid("true coefficients need a dummy and at least one feature"));
        }
        if self.true_w.iter().any(|w| !w.is_finite()) {
            return Err(invalid("true coefficients must be finite"));
        }
        if !(self.xi.is_finite() && self.xi > 0.0) {
            return Err(invalid(format!("noise precision must be positive, got {}", self.xi)));
        }
        if !(self.clip > 0.0) {
            return Err(invalid("clip threshold must be positive"));
        }
        let needs_w2 = self.nonstationarity != Nonstationarity::None
            || self.kind == SetupKind::Heteroskedasticity;
        if needs_w2 && self.true_w.len() < 3 {
            return Err(invalid("this setup needs at least two features"));
        }
        Ok(())
    }

    /// Coefficients in force at row `t`.
    pub fn coefficients_at(&self, t: usize) -> Vec<f64> {
        let mut w = self.true_w.clone();
        match self.nonstationarity {
            Nonstationarity::None => {}
            Nonstationarity::LinearDrift { to } => {
                let span = self.n_samples.saturating_sub(1).max(1) as f64;
                let frac = (t as f64 / span).min(1.0);
                w[2] = self.true_w[2] + frac * (to - self.true_w[2]);
            }
            Nonstationarity::Step { at, to } => {
                if t >= at {
                    w[2] = to;
                }
            }
        }
        w
    }
}

/// Column names `x1, x2, …` for simulated features.
pub fn feature_names(p: usize) -> Vec<String> {
    (1..=p).map(|j| format!("x{j}")).collect()
}

/// Draws a dataset from the setup. Pure in its argument.
pub fn generate(spec: &SetupSpec) -> Result<Dataset> {
    spec.validate()?;
    let p = spec.n_features();
    let mut xr = ChaCha8Rng::seed_from_u64(spec.seed);
    xr.set_stream(2 * spec.stream);
    let mut er = ChaCha8Rng::seed_from_u64(spec.seed);
    er.set_stream(2 * spec.stream + 1);
    let scale = 1.0 / spec.xi.sqrt();
    let t2 = StudentT::new(2.0).map_err(|e| Error::Internal(e.to_string()))?;

    let mut inputs = Vec::with_capacity(spec.n_samples * p);
    let mut targets = Vec::with_capacity(spec.n_samples);
    for t in 0..spec.n_samples {
        let start = inputs.len();
        inputs.extend((0..p).map(|_| xr.sample::<f64, _>(StandardNormal)));
        let x = &inputs[start..];
        let w = spec.coefficients_at(t);
        let signal: f64 = match spec.kind {
            SetupKind::Baseline => w[0] + x.iter().zip(&w[1..]).map(|(a, b)| a * b).sum::<f64>(),
            _ => w[0] + x.iter().zip(&w[1..]).map(|(a, b)| a * a * b).sum::<f64>(),
        };
        let noise = match spec.kind {
            SetupKind::Baseline | SetupKind::Interpolant => scale * er.sample::<f64, _>(StandardNormal),
            SetupKind::Noise | SetupKind::Heteroskedasticity => {
                let e = (scale * er.sample(t2)).clamp(-spec.clip * scale, spec.clip * scale);
                if spec.kind == SetupKind::Heteroskedasticity {
                    e * x[1] * x[1]
                } else {
                    e
                }
            }
        };
        targets.push(signal + noise);
    }
    Dataset::from_flat(inputs, p, targets, feature_names(p))
}

/// The same dataset with centred Gaussian noise added to one input column.
pub fn noisy_report(data: &Dataset, column: usize, noise_std: f64, seed: u64) -> Result<Dataset> {
    if !(noise_std.is_finite() && noise_std >= 0.0) {
        return Err(invalid(format!("noise std must be nonnegative, got {noise_std}")));
    }
    if column >= data.n_columns() {
        return Err(invalid(format!("column {column} out of range")));
    }
    if noise_std == 0.0 {
        return Ok(data.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noisy: Vec<f64> = data
        .column(column)
        .into_iter()
        .map(|v| v + noise_std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut out = data.clone();
    out.set_column(column, &noisy)?;
    Ok(out)
}

/// Minimiser of `Σ_t (y_t − θᵀψ_t)² + N·θᵀΣθ` over the coalition's basis.
///
/// This is the least-squares fit one expects, on average, when the inputs
/// carry independent noise with diagonal covariance `Σ` (given per basis
/// function of the coalition).
pub fn ridge_oracle(
    data: &Dataset,
    coalition: &[usize],
    hypothesis: &Hypothesis,
    noise_variance: &[f64],
) -> Result<DVector<f64>> {
    if noise_variance.len() != coalition.len() {
        return Err(invalid("one noise variance per coalition basis is required"));
    }
    if noise_variance.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(invalid("noise variances must be nonnegative"));
    }
    let design = hypothesis.design_matrix(data, coalition)?;
    let y = DVector::from_column_slice(&data.targets);
    let n = data.len() as f64;
    let penalty = DMatrix::from_diagonal(&DVector::from_iterator(
        noise_variance.len(),
        noise_variance.iter().map(|v| n * v),
    ));
    let gram = design.tr_mul(&design) + penalty;
    Ok(solve_normal_equations(&gram, &design.tr_mul(&y)).coefficients)
}

/// Samples of `φ = w²·var(X)` with `w ~ N(w_mean, w_var)`.
pub fn shapley_samples(w_mean: f64, w_var: f64, x_var: f64, n: usize, seed: u64) -> Result<Vec<f64>> {
    if !(w_var >= 0.0 && x_var > 0.0) {
        return Err(invalid("variances must be nonnegative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = w_var.sqrt();
    Ok((0..n)
        .map(|_| {
            let w = w_mean + sd * rng.sample::<f64, _>(StandardNormal);
            w * w * x_var
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub n: usize,
    pub empirical_mean: f64,
    pub theoretical_mean: f64,
    pub mean_z: f64,
    pub empirical_variance: f64,
    pub theoretical_variance: f64,
    /// Standard error of the sample variance.
    pub variance_se: f64,
    pub variance_z: f64,
}

/// Compares sample moments of `φ` with the scaled noncentral chi-squared ones.
///
/// The variance comparison is the primary check; the mean is informational.
pub fn shapley_moment_check(
    w_mean: f64,
    w_var: f64,
    x_var: f64,
    samples: &[f64],
) -> Result<MomentReport> {
    let n = samples.len();
    if n < 4 {
        return Err(invalid("moment check needs at least four samples"));
    }
    let mean = order_invariant_mean(samples);
    let dev2: Vec<f64> = samples.iter().map(|s| (s - mean).powi(2)).collect();
    let dev4: Vec<f64> = dev2.iter().map(|d| d * d).collect();
    let m2 = order_invariant_mean(&dev2);
    let m4 = order_invariant_mean(&dev4);
    let nf = n as f64;
    let variance = m2 * nf / (nf - 1.0);
    let variance_se = ((m4 - variance * variance * (nf - 3.0) / (nf - 1.0)) / nf).max(0.0).sqrt();
    let theoretical_mean = x_var * (w_mean * w_mean + w_var);
    let theoretical_variance = 2.0 * w_var * (2.0 * w_mean * w_mean + w_var) * x_var * x_var;
    let mean_se = (variance / nf).sqrt();
    let z = |diff: f64, se: f64| if se > 0.0 { diff / se } else if diff == 0.0 { 0.0 } else { f64::INFINITY };
    Ok(MomentReport {
        n,
        empirical_mean: mean,
        theoretical_mean,
        mean_z: z(mean - theoretical_mean, mean_se),
        empirical_variance: variance,
        theoretical_variance,
        variance_se,
        variance_z: z(variance - theoretical_variance, variance_se),
    })
}

/// Sample variance of `φ` for each `w_mean`, reusing one set of draws.
pub fn variance_sweep(w_means: &[f64], w_var: f64, x_var: f64, n: usize, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let sd = w_var.sqrt();
    w_means
        .iter()
        .map(|&mu| {
            let s: Vec<f64> = z.iter().map(|&zi| (mu + sd * zi).powi(2) * x_var).collect();
            shapley_moment_check(mu, w_var, x_var, &s).map(|r| r.empirical_variance)
        })
        .collect()
}

/// Central agent owns the dummy and the first feature; each other feature
/// belongs to its own support agent `a2, a3, …`.
pub fn simulation_registry(p: usize) -> Result<AgentRegistry> {
    AgentRegistry::new(
        "c",
        vec![0, 1],
        (2..=p).map(|j| (format!("a{j}"), vec![j])).collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentDescriptor {
    pub setups: Vec<SetupKind>,
    pub designs: Vec<MarketDesign>,
    pub sample_sizes: Vec<usize>,
    /// Values substituted for `w_2`; empty means no sweep.
    #[serde(default)]
    pub sweep_w2: Vec<f64>,
    pub runs: usize,
    pub seed: u64,
    pub true_w: Vec<f64>,
    pub xi: f64,
    /// Out-of-sample points per run; zero skips the out-of-sample stage.
    #[serde(default)]
    pub test_size: usize,
    pub lambda_in: f64,
    pub lambda_out: f64,
    pub alpha: f64,
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default = "default_gamma")]
    pub prior_precision: f64,
    #[serde(default = "default_clip")]
    pub clip: f64,
}

fn default_level() -> f64 {
    0.95
}

fn default_gamma() -> f64 {
    crate::bayes::DEFAULT_PRIOR_PRECISION
}

impl ExperimentDescriptor {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: &str| Err(Error::Configuration(m.to_string()));
        if self.runs == 0 {
            return cfg("runs must be at least 1");
        }
        if self.setups.is_empty() || self.designs.is_empty() || self.sample_sizes.is_empty() {
            return cfg("setups, designs and sample sizes must be non-empty");
        }
        if self.sample_sizes.contains(&0) {
            return cfg("sample sizes must be positive");
        }
        if self.true_w.len() < 3 {
            return cfg("true coefficients need a dummy and at least two features");
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) || !(self.level > 0.0 && self.level < 1.0) {
            return cfg("alpha and level must lie in (0, 1)");
        }
        if !(self.xi > 0.0 && self.prior_precision > 0.0) {
            return cfg("precisions must be positive");
        }
        if !(self.lambda_in >= 0.0 && self.lambda_out >= 0.0) {
            return cfg("bids must be nonnegative");
        }
        Ok(())
    }

    fn sweep_points(&self) -> Vec<Option<f64>> {
        if self.sweep_w2.is_empty() {
            vec![None]
        } else {
            self.sweep_w2.iter().copied().map(Some).collect()
        }
    }

    fn hypothesis(&self) -> Result<Hypothesis> {
        Hypothesis::linear(self.true_w.len() - 1, self.xi)?.with_prior_precision(self.prior_precision)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellKey {
    pub setup: SetupKind,
    pub n: usize,
    pub sweep: Option<f64>,
}

/// Everything one run produced for one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub key: CellKey,
    pub outcomes: Vec<BatchOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentRisk {
    pub agent: String,
    pub risk: RiskReport,
}

/// Reduced statistics of one stage over all runs of a cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub mean_shapley: Vec<f64>,
    pub mean_central_payment: f64,
    pub mean_budget_gap: f64,
    pub mean_central_loss: f64,
    pub mean_grand_loss: f64,
    pub agents: Vec<AgentRisk>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub design: MarketDesign,
    pub setup: SetupKind,
    pub n: usize,
    pub sweep: Option<f64>,
    pub runs: usize,
    pub in_sample: StageStats,
    pub out_of_sample: Option<StageStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub descriptor: ExperimentDescriptor,
    pub cells: Vec<CellReport>,
}

impl MonteCarloReport {
    pub fn cell(&self, design: MarketDesign, setup: SetupKind, n: usize, sweep: Option<f64>) -> Option<&CellReport> {
        self.cells
            .iter()
            .find(|c| c.design == design && c.setup == setup && c.n == n && c.sweep == sweep)
    }
}

/// Runs seed `master + run` for every cell. Designs, sample sizes, setups and
/// sweep points share the random numbers of a run.
pub fn monte_carlo_runs(desc: &ExperimentDescriptor) -> Result<Vec<RunRecord>> {
    desc.validate()?;
    let hypothesis = desc.hypothesis()?;
    let registry = simulation_registry(desc.true_w.len() - 1)?;
    let mut tasks = Vec::new();
    for &setup in &desc.setups {
        for &n in &desc.sample_sizes {
            for sweep in desc.sweep_points() {
                for run in 0..desc.runs {
                    tasks.push((run, CellKey { setup, n, sweep }));
                }
            }
        }
    }
    tasks
        .into_par_iter()
        .map(|(run, key)| {
            let mut w = desc.true_w.clone();
            if let Some(w2) = key.sweep {
                w[2] = w2;
            }
            let seed = desc.seed.wrapping_add(run as u64);
            let mut spec = SetupSpec::new(key.setup, w, desc.xi, key.n, seed);
            spec.clip = desc.clip;
            let train = generate(&spec)?;
            let test = if desc.test_size > 0 {
                spec.n_samples = desc.test_size;
                spec.stream = 1;
                Some(generate(&spec)?)
            } else {
                None
            };
            let outcomes = clear_batch(
                &train,
                test.as_ref(),
                &desc.designs,
                &hypothesis,
                &registry,
                desc.lambda_in,
                desc.lambda_out,
            )?;
            Ok(RunRecord { run, key, outcomes })
        })
        .collect()
}

/// Reduces run records to per-cell statistics. The result does not depend on
/// the order of `records`.
pub fn reduce(desc: &ExperimentDescriptor, records: &[RunRecord]) -> Result<MonteCarloReport> {
    let mut cells = Vec::new();
    for &design in &desc.designs {
        for &setup in &desc.setups {
            for &n in &desc.sample_sizes {
                for sweep in desc.sweep_points() {
                    let key = CellKey { setup, n, sweep };
                    let outcomes: Vec<&BatchOutcome> = records
                        .iter()
                        .filter(|r| r.key == key)
                        .flat_map(|r| r.outcomes.iter().filter(|o| o.design == design))
                        .collect();
                    if outcomes.is_empty() {
                        continue;
                    }
                    let seed = desc.seed ^ 0x5eed_5eed;
                    let ins: Vec<&StageSummary> = outcomes.iter().map(|o| &o.in_sample).collect();
                    let outs: Option<Vec<&StageSummary>> =
                        outcomes.iter().map(|o| o.out_of_sample.as_ref()).collect();
                    cells.push(CellReport {
                        design,
                        setup,
                        n,
                        sweep,
                        runs: outcomes.len(),
                        in_sample: stage_stats(&ins, desc, seed)?,
                        out_of_sample: outs.map(|o| stage_stats(&o, desc, seed)).transpose()?,
                    });
                }
            }
        }
    }
    Ok(MonteCarloReport {
        descriptor: desc.clone(),
        cells,
    })
}

fn stage_stats(summaries: &[&StageSummary], desc: &ExperimentDescriptor, seed: u64) -> Result<StageStats> {
    let mean_of = |f: &dyn Fn(&StageSummary) -> f64| {
        order_invariant_mean(&summaries.iter().map(|s| f(s)).collect::<Vec<_>>())
    };
    let n_features = summaries[0].shapley.len();
    let agents = summaries[0]
        .revenues
        .iter()
        .enumerate()
        .map(|(k, (id, _))| {
            let mut samples: Vec<f64> = summaries.iter().map(|s| s.revenues[k].1).collect();
            samples.sort_by(f64::total_cmp);
            Ok(AgentRisk {
                agent: id.clone(),
                risk: RiskReport::from_samples(&samples, desc.alpha, desc.level, seed)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StageStats {
        mean_shapley: (0..n_features).map(|j| mean_of(&|s| s.shapley[j])).collect(),
        mean_central_payment: mean_of(&|s| s.central_payment),
        mean_budget_gap: mean_of(&|s| s.budget_gap),
        mean_central_loss: mean_of(&|s| s.central_loss),
        mean_grand_loss: mean_of(&|s| s.grand_loss),
        agents,
    })
}

/// Runs the experiment, optionally on a dedicated pool of `jobs` threads.
pub fn monte_carlo(desc: &ExperimentDescriptor, jobs: Option<usize>) -> Result<MonteCarloReport> {
    let records = match jobs {
        Some(j) => rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build()
            .map_err(|e| Error::Internal(e.to_string()))?
            .install(|| monte_carlo_runs(desc))?,
        None => monte_carlo_runs(desc)?,
    };
    reduce(desc, &records)
}

/// Grand-coalition posterior mean after every observation, with forgetting.
pub fn posterior_trace(data: &Dataset, hypothesis: &Hypothesis) -> Result<Vec<Vec<f64>>> {
    let coalition: Vec<usize> = (0..hypothesis.n_basis()).collect();
    let prior = prior_for_coalition(&coalition, hypothesis.prior_precision)?;
    let mut post = prior.clone();
    let mut psi = Vec::new();
    let mut trace = Vec::with_capacity(data.len());
    for t in 0..data.len() {
        hypothesis.basis_row_into(data.row(t), &coalition, &mut psi);
        let flat = flatten_prior(&post, &prior, hypothesis.forgetting)?;
        post = update_posterior(&flat, &psi, data.targets[t], hypothesis.noise_precision)?;
        trace.push(post.mean.as_slice().to_vec());
    }
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackingReport {
    pub taus: Vec<f64>,
    /// Mean absolute error on `w_2` after the change, averaged over runs, per `tau`.
    pub mean_abs_error: Vec<f64>,
    /// Posterior mean of `w_2` per step, averaged over runs, per `tau`.
    pub mean_path: Vec<Vec<f64>>,
    /// True `w_2` per step.
    pub truth: Vec<f64>,
}

/// Tracks a changing `w_2` with several forgetting factors on common data.
/// Errors are measured over `window` steps starting at `from` (0-based).
pub fn tracking_experiment(
    spec: &SetupSpec,
    taus: &[f64],
    runs: usize,
    from: usize,
    window: usize,
) -> Result<TrackingReport> {
    if runs == 0 {
        return Err(invalid("runs must be at least 1"));
    }
    if from + window > spec.n_samples || window == 0 {
        return Err(invalid("error window exceeds the sample"));
    }
    let truth: Vec<f64> = (0..spec.n_samples).map(|t| spec.coefficients_at(t)[2]).collect();
    let per_run = (0..runs)
        .into_par_iter()
        .map(|run| {
            let mut s = spec.clone();
            s.seed = spec.seed.wrapping_add(run as u64);
            let data = generate(&s)?;
            taus.iter()
                .map(|&tau| {
                    let h = Hypothesis::linear(s.n_features(), s.xi)?.with_forgetting(tau)?;
                    let path: Vec<f64> = posterior_trace(&data, &h)?.into_iter().map(|m| m[2]).collect();
                    let err: Vec<f64> = (from..from + window).map(|t| (path[t] - truth[t]).abs()).collect();
                    Ok((order_invariant_mean(&err), path))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut mean_abs_error = Vec::new();
    let mut mean_path = Vec::new();
    for k in 0..taus.len() {
        mean_abs_error.push(order_invariant_mean(&per_run.iter().map(|r| r[k].0).collect::<Vec<_>>()));
        mean_path.push(
            (0..spec.n_samples)
                .map(|t| order_invariant_mean(&per_run.iter().map(|r| r[k].1[t]).collect::<Vec<_>>()))
                .collect(),
        );
    }
    Ok(TrackingReport {
        taus: taus.to_vec(),
        mean_abs_error,
        mean_path,
        truth,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthfulnessReport {
    pub noise_stds: Vec<f64>,
    /// Mean in-sample revenue of the corrupted agent per noise level.
    pub mean_revenue: Vec<f64>,
}

/// In-sample revenue of the owner of `column` when it reports with added noise.
/// Each run reuses one noise draw across noise levels.
pub fn truthfulness_experiment(
    spec: &SetupSpec,
    column: usize,
    noise_stds: &[f64],
    runs: usize,
    design: MarketDesign,
    lambda: f64,
) -> Result<TruthfulnessReport> {
    if runs == 0 {
        return Err(invalid("runs must be at least 1"));
    }
    let p = spec.n_features();
    let hypothesis = Hypothesis::linear(p, spec.xi)?;
    let registry = simulation_registry(p)?;
    let agent = registry
        .supports
        .iter()
        .position(|a| a.features.contains(&(column + 1)))
        .ok_or_else(|| invalid(format!("column {column} is not owned by a support agent")))?;
    let per_run = (0..runs)
        .into_par_iter()
        .map(|run| {
            let mut s = spec.clone();
            s.seed = spec.seed.wrapping_add(run as u64);
            let data = generate(&s)?;
            noise_stds
                .iter()
                .map(|&sd| {
                    let reported = noisy_report(&data, column, sd, s.seed ^ 0xa5a5_a5a5)?;
                    let out = clear_batch(&reported, None, &[design], &hypothesis, &registry, lambda, lambda)?;
                    Ok(out[0].in_sample.revenues[agent].1)
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TruthfulnessReport {
        noise_stds: noise_stds.to_vec(),
        mean_revenue: (0..noise_stds.len())
            .map(|k| order_invariant_mean(&per_run.iter().map(|r| r[k]).collect::<Vec<_>>()))
            .collect(),
    })
}

/// Mean MLE coefficients over `replications` independent noisy reports of
/// `column`, with the Monte Carlo standard error of each coefficient.
pub fn noisy_mle_average(
    data: &Dataset,
    coalition: &[usize],
    hypothesis: &Hypothesis,
    column: usize,
    noise_std: f64,
    replications: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if replications < 2 {
        return Err(invalid("at least two replications are needed"));
    }
    let fits = (0..replications)
        .into_par_iter()
        .map(|r| {
            let noisy = noisy_report(data, column, noise_std, seed.wrapping_add(r as u64))?;
            Ok(crate::bayes::mle_fit(&noisy, coalition, hypothesis)?.coefficients)
        })
        .collect::<Result<Vec<_>>>()?;
    let d = coalition.len();
    let nf = replications as f64;
    let mut mean = Vec::with_capacity(d);
    let mut se = Vec::with_capacity(d);
    for j in 0..d {
        let v: Vec<f64> = fits.iter().map(|f| f[j]).collect();
        let m = order_invariant_mean(&v);
        let var = order_invariant_mean(&v.iter().map(|x| (x - m).powi(2)).collect::<Vec<_>>()) * nf / (nf - 1.0);
        mean.push(m);
        se.push((var / nf).sqrt());
    }
    Ok((mean, se))
}

/// Draws from `N(0, sd²)`; small helper for examples and tests.
pub fn gaussian_draws(n: usize, sd: f64, seed: u64) -> Result<Vec<f64>> {
    let normal = Normal::new(0.0, sd).map_err(|e| invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| rng.sample(normal)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bayes::mle_fit;

    fn residuals(spec: &SetupSpec, data: &Dataset) -> Vec<f64> {
        (0..data.len())
            .map(|t| {
                let w = spec.coefficients_at(t);
                let x = data.row(t);
                data.targets[t] - w[0] - x.iter().zip(&w[1..]).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }

    #[test]
    fn noise_free_limit() {
        let spec = SetupSpec::new(SetupKind::Baseline, vec![-0.11, 0.31, 0.08, 0.65], 1e8, 200, 1);
        let data = generate(&spec).unwrap();
        assert!(residuals(&spec, &data).iter().all(|r| r.abs() < 1e-2));
    }

    #[test]
    fn baseline_noise_variance() {
        let spec = SetupSpec::new(SetupKind::Baseline, vec![-0.1, 0.3, 0.8, -0.4], 0.5, 10_000, 2);
        let data = generate(&spec).unwrap();
        let r = residuals(&spec, &data);
        let m = r.iter().sum::<f64>() / r.len() as f64;
        let v = r.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (r.len() - 1) as f64;
        assert!((v - 2.0).abs() < 0.1, "{v}");
    }

    #[test]
    fn heteroskedastic_noise_grows_with_x2() {
        let spec = SetupSpec::new(SetupKind::Heteroskedasticity, vec![0.1, -0.5, 0.0, 0.7], 0.67, 20_000, 3);
        let data = generate(&spec).unwrap();
        let mut small = Vec::new();
        let mut large = Vec::new();
        for t in 0..data.len() {
            let x = data.row(t);
            let signal = 0.1 - 0.5 * x[0] * x[0] + 0.7 * x[2] * x[2];
            let e = data.targets[t] - signal;
            if x[1].abs() < 0.5 {
                small.push(e * e);
            } else if x[1].abs() > 1.5 {
                large.push(e * e);
            }
        }
        let med = |v: &mut Vec<f64>| {
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        };
        assert!(med(&mut large) > med(&mut small));
    }

    #[test]
    fn setups_share_inputs() {
        let w = vec![0.1, -0.5, 0.0, 0.7];
        let a = generate(&SetupSpec::new(SetupKind::Baseline, w.clone(), 1.0, 50, 9)).unwrap();
        let b = generate(&SetupSpec::new(SetupKind::Noise, w, 1.0, 50, 9)).unwrap();
        for t in 0..50 {
            assert_eq!(a.row(t), b.row(t));
        }
    }

    #[test]
    fn generate_is_pure() {
        let spec = SetupSpec::new(SetupKind::Noise, vec![0.1, -0.5, 0.0, 0.7], 0.67, 100, 4);
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        assert!(generate(&SetupSpec::new(SetupKind::Baseline, vec![0.1], 1.0, 5, 1)).is_err());
    }

    #[test]
    fn mle_recovers_noise_free_coefficients() {
        let w = vec![-0.11, 0.31, 0.08, 0.65];
        let data = generate(&SetupSpec::new(SetupKind::Baseline, w.clone(), 1e30, 50, 5)).unwrap();
        let h = Hypothesis::linear(3, 1.0).unwrap();
        let fit = mle_fit(&data, &[0, 1, 2, 3], &h).unwrap();
        for (a, b) in fit.coefficients.iter().zip(&w) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn noisy_report_properties() {
        let spec = SetupSpec::new(SetupKind::Baseline, vec![0.1, -0.5, 0.6, 0.7], 1.0, 10_000, 6);
        let data = generate(&spec).unwrap();
        assert_eq!(noisy_report(&data, 1, 0.0, 1).unwrap(), data);
        let noisy = noisy_report(&data, 1, 1.0, 1).unwrap();
        assert_eq!(noisy.column(0), data.column(0));
        assert_eq!(noisy.column(2), data.column(2));
        assert_eq!(noisy.targets, data.targets);
        let corr = |x: &[f64], y: &[f64]| {
            let n = x.len() as f64;
            let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
            let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
            let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
            let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
            sxy / (sxx * syy).sqrt()
        };
        assert!(corr(&noisy.column(1), &noisy.targets).abs() < corr(&data.column(1), &data.targets).abs());
        assert!(noisy_report(&data, 1, -1.0, 1).is_err());
    }

    #[test]
    fn ridge_limits() {
        let spec = SetupSpec::new(SetupKind::Baseline, vec![0.1, -0.5, 0.6, 0.7], 1.0, 300, 7);
        let data = generate(&spec).unwrap();
        let h = Hypothesis::linear(3, 1.0).unwrap();
        let c = [0, 1, 2, 3];
        let plain = ridge_oracle(&data, &c, &h, &[0.0; 4]).unwrap();
        let mle = mle_fit(&data, &c, &h).unwrap().coefficients;
        assert!((plain - mle).amax() < 1e-12);
        let mut last = f64::INFINITY;
        for beta in [0.1, 1.0, 10.0, 100.0, 1000.0] {
            let norm = ridge_oracle(&data, &c, &h, &[beta; 4]).unwrap().norm();
            assert!(norm < last);
            last = norm;
        }
        assert!(last < 1e-2);
    }

    #[test]
    fn moment_check_degenerate_limit() {
        let s = shapley_samples(0.7, 0.0, 2.0, 100, 1).unwrap();
        assert!(s.iter().all(|&v| (v - 0.98).abs() < 1e-12));
        let r = shapley_moment_check(0.7, 0.0, 2.0, &s).unwrap();
        assert_eq!(r.theoretical_variance, 0.0);
        assert!(r.empirical_variance < 1e-20);
    }

    #[test]
    fn reduction_ignores_run_order() {
        let desc = ExperimentDescriptor {
            setups: vec![SetupKind::Baseline, SetupKind::Noise],
            designs: vec![MarketDesign::BlrNll, MarketDesign::BlrKlM],
            sample_sizes: vec![10, 30],
            sweep_w2: vec![],
            runs: 25,
            seed: 11,
            true_w: vec![-0.1, 0.8, 0.7, -0.9],
            xi: 1.0,
            test_size: 20,
            lambda_in: 0.03,
            lambda_out: 0.03,
            alpha: 0.05,
            level: 0.95,
            prior_precision: 1e-6,
            clip: 50.0,
        };
        let mut records = monte_carlo_runs(&desc).unwrap();
        let a = reduce(&desc, &records).unwrap();
        records.reverse();
        records.swap(3, 17);
        let b = reduce(&desc, &records).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let single = ExperimentDescriptor { runs: 1, ..desc.clone() };
        let r = monte_carlo(&single, Some(1)).unwrap();
        let recs = monte_carlo_runs(&single).unwrap();
        let cell = r.cell(MarketDesign::BlrNll, SetupKind::Baseline, 10, None).unwrap();
        let direct = &recs.iter().find(|x| x.key.setup == SetupKind::Baseline && x.key.n == 10).unwrap().outcomes[0];
        assert_eq!(cell.in_sample.mean_shapley, direct.in_sample.shapley);
        assert!(ExperimentDescriptor { runs: 0, ..desc }.validate().is_err());
    }
}
