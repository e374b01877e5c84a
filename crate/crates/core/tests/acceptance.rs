//! End-to-end acceptance checks. Runs as a plain binary so every check
//! prints its own line; exits non-zero if any check fails.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use regmkt::allocation::{marginal_contribution, shapley_values, CoalitionCache, ModelFamily, ShapleyWeights};
use regmkt::bayes::{batch_posterior, predictive, prior_for_coalition};
use regmkt::data_io::{ingest_reader, run_replay, LedgerFormat, LedgerTable, ReplayConfig, TableSchema};
use regmkt::market::run_online;
use regmkt::scoring::{expected_shortfall, gaussian_kl};
use regmkt::simulation::{
    gaussian_draws, generate, monte_carlo, noisy_mle_average, ridge_oracle, shapley_moment_check,
    shapley_samples, simulation_registry, tracking_experiment, truthfulness_experiment, variance_sweep,
    ExperimentDescriptor, MonteCarloReport, Nonstationarity, SetupKind, SetupSpec,
};
use regmkt::{Dataset, Hypothesis, MarketConfig, MarketDesign, PredictiveDistribution, Stage};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

// Independent reference formulas.

fn ref_nll(p: &PredictiveDistribution, y: f64) -> f64 {
    0.5 * (2.0 * std::f64::consts::PI / p.precision).ln() + 0.5 * p.precision * (y - p.mean).powi(2)
}

fn ref_kl(p: &PredictiveDistribution, q: &PredictiveDistribution) -> f64 {
    let (vp, vq) = (1.0 / p.precision, 1.0 / q.precision);
    0.5 * ((vq / vp).ln() + (vp + (p.mean - q.mean).powi(2)) / vq - 1.0)
}

fn ref_marginal(design: MarketDesign, preds: &[PredictiveDistribution], y: f64, mask: usize, with: usize) -> f64 {
    match design {
        MarketDesign::MleNll | MarketDesign::BlrNll => ref_nll(&preds[mask], y) - ref_nll(&preds[with], y),
        MarketDesign::BlrKlV => ref_kl(&preds[with], &preds[0]) - ref_kl(&preds[mask], &preds[0]),
        MarketDesign::BlrKlM => ref_kl(&preds[with], &preds[mask]),
    }
}

/// Average marginal contribution over every arrival order. Walks each
/// ordered prefix once; an edge that adds a player is shared by the
/// `(n − |prefix|)!` completions of that prefix.
fn permutation_oracle(design: MarketDesign, preds: &[PredictiveDistribution], y: f64, n: usize) -> Vec<f64> {
    fn factorial(k: usize) -> f64 {
        (1..=k).map(|i| i as f64).product()
    }
    fn walk(design: MarketDesign, preds: &[PredictiveDistribution], y: f64, n: usize, mask: usize, acc: &mut [f64]) {
        for p in (0..n).filter(|p| mask >> p & 1 == 0) {
            let with = mask | 1 << p;
            acc[p] += ref_marginal(design, preds, y, mask, with) * factorial(n - with.count_ones() as usize);
            walk(design, preds, y, n, with, acc);
        }
    }
    let mut acc = vec![0.0; n];
    walk(design, preds, y, n, 0, &mut acc);
    acc.into_iter().map(|a| a / factorial(n)).collect()
}

fn random_predictives(rng: &mut ChaCha8Rng, n_masks: usize) -> Vec<PredictiveDistribution> {
    (0..n_masks)
        .map(|_| PredictiveDistribution::new(rng.random_range(-2.0..2.0), rng.random_range(0.2..5.0)).unwrap())
        .collect()
}

fn ac1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for instance in 0..100 {
        let n = 1 + instance % 6;
        let support: Vec<usize> = (2..2 + n).collect();
        for design in MarketDesign::ALL {
            let mut cache = CoalitionCache::new(design.family(), vec![0, 1], support.clone()).unwrap();
            let preds = random_predictives(&mut rng, 1 << n);
            let y = rng.random_range(-2.0..2.0);
            cache.push_step(y, preds.clone()).unwrap();
            let fast = shapley_values(design, 0, &cache, &ShapleyWeights::standard(n).unwrap()).unwrap();
            let slow = permutation_oracle(design, &preds, y, n);
            for (a, b) in fast.iter().zip(&slow) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    outcome(worst <= 1e-12, format!("max |subset - permutation| = {worst:.3e} over 100 instances x 4 designs"))
}

fn per_step_gaps(design: MarketDesign, data: &Dataset, tau: f64) -> f64 {
    let p = data.n_columns();
    let cfg = MarketConfig {
        design,
        lambda_in: 1.0,
        lambda_out: 1.0,
        hypothesis: Hypothesis::linear(p, 1.0).unwrap().with_forgetting(tau).unwrap(),
        alpha: 0.05,
        seed: 0,
    };
    let result = run_online(data, &cfg, &simulation_registry(p).unwrap()).unwrap();
    result
        .rows()
        .iter()
        .map(|r| r.budget_gap().abs() / r.pi_c.abs().max(1.0))
        .fold(0.0, f64::max)
}

fn baseline_grid(sizes: Vec<usize>, designs: Vec<MarketDesign>, runs: usize) -> ExperimentDescriptor {
    ExperimentDescriptor {
        setups: vec![SetupKind::Baseline],
        designs,
        sample_sizes: sizes,
        sweep_w2: vec![],
        runs,
        seed: 2024,
        true_w: vec![-0.1, 0.8, 0.7, -0.9],
        xi: 1.0,
        test_size: 0,
        lambda_in: 1.0,
        lambda_out: 1.0,
        alpha: 0.05,
        level: 0.95,
        prior_precision: 1e-6,
        clip: 50.0,
    }
}

fn ac2() -> Outcome {
    let data = generate(&SetupSpec::new(SetupKind::Baseline, vec![-0.1, 0.8, 0.7, -0.9], 1.0, 1000, 7)).unwrap();
    let mut details = Vec::new();
    let mut ok = true;
    for design in [MarketDesign::MleNll, MarketDesign::BlrNll, MarketDesign::BlrKlV] {
        let g = per_step_gaps(design, &data, 0.99);
        ok &= g <= 1e-9;
        details.push(format!("{design} max rel gap {g:.2e}"));
    }
    let report = monte_carlo(&baseline_grid(vec![8, 10, 32, 128, 1024], vec![MarketDesign::BlrKlM], 200), None).unwrap();
    let gap = |n| report.cell(MarketDesign::BlrKlM, SetupKind::Baseline, n, None).unwrap().in_sample.mean_budget_gap;
    let at10 = gap(10);
    let trend: Vec<f64> = [8, 32, 128, 1024].into_iter().map(gap).collect();
    let shrinking = trend.windows(2).all(|w| w[1] < w[0]);
    ok &= at10 > 0.0 && shrinking;
    details.push(format!(
        "blr_kl_m gap N=10 {at10:.4}, N=8/32/128/1024 {:.4}/{:.4}/{:.4}/{:.4}",
        trend[0], trend[1], trend[2], trend[3]
    ));
    outcome(ok, details.join("; "))
}

fn ac3() -> Outcome {
    let mut min = f64::INFINITY;
    let mut count = 0usize;
    let hyp = Hypothesis::linear(4, 1.0).unwrap();
    let support = vec![2, 3, 4];
    for run in 0..420u64 {
        let n = 10 + (run as usize % 40);
        let data = generate(&SetupSpec::new(SetupKind::Interpolant, vec![0.2, -0.5, 0.3, 0.0, 0.9], 1.0, n, run)).unwrap();
        let mut cache = CoalitionCache::new(ModelFamily::Bayesian, vec![0, 1], support.clone()).unwrap();
        let posts: Vec<_> = (0..cache.n_masks())
            .map(|m| {
                let c = cache.coalition_basis(m);
                let prior = prior_for_coalition(&c, hyp.prior_precision).unwrap();
                (batch_posterior(&prior, &hyp.design_matrix(&data, &c).unwrap(), &data.targets, 1.0).unwrap(), c)
            })
            .collect();
        for t in 0..data.len() {
            let preds = posts
                .iter()
                .map(|(post, c)| predictive(post, &hyp.basis_row(data.row(t), c), 1.0).unwrap())
                .collect();
            cache.push_step(data.targets[t], preds).unwrap();
            for &f in &support {
                let bit = 1 << cache.player_of(f).unwrap();
                for mask in (0..cache.n_masks()).filter(|m| m & bit == 0) {
                    min = min.min(marginal_contribution(MarketDesign::BlrKlM, f, mask, t, &cache).unwrap());
                    count += 1;
                }
            }
            let phi = shapley_values(MarketDesign::BlrKlM, t, &cache, &ShapleyWeights::standard(3).unwrap()).unwrap();
            min = min.min(phi.into_iter().fold(f64::INFINITY, f64::min));
        }
    }
    outcome(
        count >= 100_000 && min >= -1e-12,
        format!("{count} marginal contributions, minimum {min:.3e}"),
    )
}

fn ac4() -> Outcome {
    let designs = vec![MarketDesign::BlrNll, MarketDesign::BlrKlM, MarketDesign::BlrKlV];
    let report = monte_carlo(&baseline_grid(vec![2000], designs, 200), None).unwrap();
    let phi = |d| report.cell(d, SetupKind::Baseline, 2000, None).unwrap().in_sample.mean_shapley.clone();
    let reference = phi(MarketDesign::BlrNll);
    let mut worst = 0.0f64;
    for d in [MarketDesign::BlrKlM, MarketDesign::BlrKlV] {
        for (a, b) in phi(d).iter().zip(&reference) {
            worst = worst.max((a - b).abs() / b.abs());
        }
    }
    outcome(
        worst <= 0.05,
        format!("max relative deviation from blr_nll {worst:.4} (blr_nll phi {reference:.4?})"),
    )
}

/// Composite Simpson quadrature of `∫ p log(p/q)` over ±12 sd of `p`.
fn kl_quadrature(p: &PredictiveDistribution, q: &PredictiveDistribution) -> f64 {
    let sd = p.precision.powf(-0.5);
    let (a, b) = (p.mean - 12.0 * sd, p.mean + 12.0 * sd);
    let n = 20_000;
    let h = (b - a) / n as f64;
    let integrand = |x: f64| {
        let lp = -ref_nll(p, x);
        let lq = -ref_nll(q, x);
        lp.exp() * (lp - lq)
    };
    let mut s = integrand(a) + integrand(b);
    for i in 1..n {
        s += integrand(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

fn ac5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut worst = 0.0f64;
    let mut worst_identity = 0.0f64;
    for _ in 0..1000 {
        let p = PredictiveDistribution::new(rng.random_range(-3.0..3.0), rng.random_range(0.1..10.0)).unwrap();
        let q = PredictiveDistribution::new(rng.random_range(-3.0..3.0), rng.random_range(0.1..10.0)).unwrap();
        worst = worst.max((gaussian_kl(&p, &q) - kl_quadrature(&p, &q)).abs());
        let q_same = PredictiveDistribution::new(q.mean, p.precision).unwrap();
        let expected = 0.5 * p.precision * (p.mean - q.mean).powi(2);
        worst_identity = worst_identity.max((gaussian_kl(&p, &q_same) - expected).abs());
    }
    outcome(
        worst <= 1e-6 && worst_identity <= 1e-12,
        format!("max |closed form - quadrature| {worst:.2e}, equal-precision identity {worst_identity:.2e}"),
    )
}

fn calibration_descriptor() -> ExperimentDescriptor {
    ExperimentDescriptor {
        setups: SetupKind::ALL.to_vec(),
        designs: vec![MarketDesign::MleNll, MarketDesign::BlrNll],
        sample_sizes: vec![10, 1000],
        sweep_w2: vec![],
        runs: 200,
        seed: 606,
        true_w: vec![-0.1, 0.3, 0.8, -0.4],
        xi: 0.5,
        test_size: 1000,
        lambda_in: 1.0,
        lambda_out: 1.0,
        alpha: 0.05,
        level: 0.95,
        prior_precision: 1e-6,
        clip: 50.0,
    }
}

fn ac6() -> Outcome {
    let report = calibration_descriptor();
    let report = monte_carlo(&report, None).unwrap();
    let loss = |d, s, n| {
        report
            .cell(d, s, n, None)
            .unwrap()
            .out_of_sample
            .as_ref()
            .unwrap()
            .mean_grand_loss
    };
    let mut ok = true;
    let mut details = Vec::new();
    for setup in SetupKind::ALL {
        let gain10 = loss(MarketDesign::MleNll, setup, 10) - loss(MarketDesign::BlrNll, setup, 10);
        let gain1000 = loss(MarketDesign::MleNll, setup, 1000) - loss(MarketDesign::BlrNll, setup, 1000);
        ok &= gain10 >= 0.0 && gain10 > gain1000;
        details.push(format!("{setup}: gain N=10 {gain10:.3}, N=1000 {gain1000:.2e}"));
    }
    outcome(ok, details.join("; "))
}

/// `(ΨᵀΨ + N·diag(σ²_noise))⁻¹ Ψᵀ y` for the basis `[1, x_1, …]`.
fn ridge_reference(data: &Dataset, noise_var: &[f64]) -> Vec<f64> {
    let n = data.len();
    let d = data.n_columns() + 1;
    let psi = DMatrix::from_fn(n, d, |t, k| if k == 0 { 1.0 } else { data.row(t)[k - 1] });
    let y = DVector::from_column_slice(&data.targets);
    let mut gram = psi.transpose() * &psi;
    for k in 0..d {
        gram[(k, k)] += n as f64 * noise_var[k];
    }
    gram.lu().solve(&(psi.transpose() * y)).unwrap().as_slice().to_vec()
}

fn ac7() -> Outcome {
    let w = vec![0.1, -0.5, 0.0, 0.7];
    let spec = SetupSpec::new(SetupKind::Baseline, w.clone(), 1.0, 500, 77);
    let stds = [0.0, 0.25, 0.5, 1.0];
    // Column 2 carries the informative feature owned by agent a3.
    let rep = truthfulness_experiment(&spec, 2, &stds, 200, MarketDesign::BlrNll, 1.0).unwrap();
    let monotone = rep.mean_revenue.windows(2).all(|p| p[1] < p[0]);

    let big = generate(&SetupSpec::new(SetupKind::Baseline, w, 1.0, 5000, 78)).unwrap();
    let hyp = Hypothesis::linear(3, 1.0).unwrap();
    let coalition = [0, 1, 2, 3];
    let sd = 0.5;
    let (mean, se) = noisy_mle_average(&big, &coalition, &hyp, 2, sd, 500, 79).unwrap();
    let noise_var = [0.0, 0.0, 0.0, sd * sd];
    let reference = ridge_reference(&big, &noise_var);
    let library = ridge_oracle(&big, &coalition, &hyp, &noise_var).unwrap();
    let lib_agrees = reference.iter().zip(library.iter()).all(|(a, b)| (a - b).abs() <= 1e-10);
    let worst_z = mean
        .iter()
        .zip(&se)
        .zip(&reference)
        .map(|((m, s), r)| (m - r).abs() / s)
        .fold(0.0, f64::max);
    outcome(
        monotone && lib_agrees && worst_z <= 3.0,
        format!(
            "mean revenue by noise {:.4?}; ridge match max |z| {worst_z:.2} (library agrees: {lib_agrees})",
            rep.mean_revenue
        ),
    )
}

fn risk_descriptor() -> ExperimentDescriptor {
    ExperimentDescriptor {
        setups: vec![SetupKind::Noise, SetupKind::Heteroskedasticity],
        designs: vec![MarketDesign::BlrNll, MarketDesign::BlrKlM, MarketDesign::BlrKlV],
        sample_sizes: vec![1000],
        sweep_w2: vec![],
        runs: 500,
        seed: 808,
        true_w: vec![0.1, -0.5, 0.0, 0.7],
        xi: 0.67,
        test_size: 1000,
        lambda_in: 0.03,
        lambda_out: 0.03,
        alpha: 0.05,
        level: 0.95,
        prior_precision: 1e-6,
        clip: 50.0,
    }
}

fn ac8() -> Outcome {
    let report: MonteCarloReport = monte_carlo(&risk_descriptor(), None).unwrap();
    let mut ok = true;
    let mut details = Vec::new();
    for setup in [SetupKind::Noise, SetupKind::Heteroskedasticity] {
        let risk = |d| {
            let cell = report.cell(d, setup, 1000, None).unwrap();
            let stage = cell.out_of_sample.as_ref().unwrap();
            stage.agents.iter().find(|a| a.agent == "a2").unwrap().risk
        };
        let (nll, m, v) = (risk(MarketDesign::BlrNll), risk(MarketDesign::BlrKlM), risk(MarketDesign::BlrKlV));
        let (lo, hi) = m.shortfall_interval.unwrap();
        let half = 0.5 * (hi - lo);
        let pass = m.expected_shortfall < nll.expected_shortfall
            && v.expected_shortfall < nll.expected_shortfall
            && m.expected_shortfall <= 3.0 * half;
        ok &= pass;
        details.push(format!(
            "{setup}: ES nll {:.3e}, kl_m {:.3e} (ci half {half:.1e}), kl_v {:.3e}",
            nll.expected_shortfall, m.expected_shortfall, v.expected_shortfall
        ));
    }
    outcome(ok, details.join("; "))
}

fn ac9() -> Outcome {
    let draws = gaussian_draws(1_000_000, 1.0, 9).unwrap();
    let es = expected_shortfall(&draws, 0.05).unwrap();
    // φ(z_{0.95}) / α with z_{0.95} the standard normal 95% quantile.
    let z = 1.644_853_626_951_472_2f64;
    let analytic = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt() / 0.05;
    outcome(
        (es - analytic).abs() <= 0.02,
        format!("empirical {es:.4}, analytic {analytic:.4}"),
    )
}

fn ac10() -> Outcome {
    let mut spec = SetupSpec::new(SetupKind::Baseline, vec![0.0, -0.2, 0.1, 0.3], 0.98, 1000, 1010);
    spec.nonstationarity = Nonstationarity::Step { at: 500, to: 0.5 };
    let rep = tracking_experiment(&spec, &[0.94, 1.0], 200, 500, 100).unwrap();
    outcome(
        rep.mean_abs_error[0] < rep.mean_abs_error[1],
        format!(
            "mean |error| on w2 after change: tau=0.94 {:.4}, tau=1 {:.4}",
            rep.mean_abs_error[0], rep.mean_abs_error[1]
        ),
    )
}

fn ac11() -> Outcome {
    let (mu, v, xv) = (0.5, 0.04, 2.0);
    let samples = shapley_samples(mu, v, xv, 100_000, 11).unwrap();
    let m = shapley_moment_check(mu, v, xv, &samples).unwrap();
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let m4 = samples.iter().map(|s| (s - mean).powi(4)).sum::<f64>() / n;
    let se = ((m4 - var * var) / n).sqrt();
    let theory = 2.0 * v * (2.0 * mu * mu + v) * xv * xv;
    let z = (var - theory).abs() / se;
    let lib_agrees = (m.empirical_variance - var).abs() <= 1e-9 * var && (m.theoretical_variance - theory).abs() <= 1e-12;

    let means: Vec<f64> = (0..=10).map(|k| k as f64 * 0.1).collect();
    let sweep = variance_sweep(&means, v, xv, 100_000, 12).unwrap();
    let convex = sweep.windows(3).all(|w| w[2] - 2.0 * w[1] + w[0] >= 0.0);
    outcome(
        z <= 3.0 && lib_agrees && convex,
        format!("variance {var:.5} vs {theory:.5} (|z| {z:.2}); sweep convex: {convex}"),
    )
}

fn toy_csv(rows: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = chrono::NaiveDate::from_ymd_opt(2019, 1, 1).unwrap();
    let mut out = String::from("timestamp,A,B\n");
    let mut b_prev = 0.0f64;
    for i in 0..rows {
        let b: f64 = rng.sample(StandardNormal);
        let e: f64 = rng.sample(StandardNormal);
        let a = 0.8 * b_prev + 0.3 * e;
        out.push_str(&format!("{},{a},{b}\n", start + chrono::Days::new(i as u64)));
        b_prev = b;
    }
    out
}

fn ac12() -> Outcome {
    let csv = toy_csv(400, 12);
    let config = ReplayConfig {
        all_central: true,
        ..ReplayConfig::default()
    };
    let run = || {
        let table = ingest_reader(csv.as_bytes(), &TableSchema::default()).unwrap();
        let outcomes = run_replay(&table, &config).unwrap();
        let ledgers: Vec<Vec<u8>> = outcomes
            .iter()
            .map(|o| LedgerTable::from_result(&o.result).to_bytes(LedgerFormat::Csv).unwrap())
            .collect();
        (outcomes, ledgers)
    };
    let (first, bytes1) = run();
    let (_, bytes2) = run();
    let identical = bytes1 == bytes2;
    let quarters = ["2019Q1", "2019Q2", "2019Q3", "2019Q4", "2020Q1"];
    let rows: Vec<_> = first.iter().flat_map(|o| o.quarterly.iter()).collect();
    let shape = rows.len() == 2 * quarters.len()
        && ["A", "B"].iter().all(|e| {
            quarters
                .iter()
                .all(|q| rows.iter().filter(|r| r.central == *e && r.quarter == *q).count() == 1)
        })
        && rows.iter().all(|r| r.in_sample.is_finite() && r.out_of_sample.is_some_and(f64::is_finite));
    let a_central = first.iter().find(|o| o.central == "A").unwrap();
    let b_revenue = a_central.result.cumulative_revenues(Stage::OutOfSample)[0].1;
    outcome(
        identical && shape && b_revenue > 0.0,
        format!(
            "ledgers identical: {identical}; quarterly rows {} (entity x quarter x stage ok: {shape}); B out-of-sample revenue {b_revenue:.3}",
            rows.len()
        ),
    )
}

fn main() {
    let checks: [(&str, fn() -> Outcome, Option<Duration>); 12] = [
        ("AC-1 Shapley oracle equivalence", ac1, Some(Duration::from_secs(10))),
        ("AC-2 budget balance", ac2, None),
        ("AC-3 Gibbs nonnegativity", ac3, None),
        ("AC-4 convergence of designs", ac4, Some(Duration::from_secs(180))),
        ("AC-5 Gaussian KL correctness", ac5, None),
        ("AC-6 BLR vs MLE calibration", ac6, None),
        ("AC-7 truthfulness", ac7, None),
        ("AC-8 risk reduction", ac8, Some(Duration::from_secs(300))),
        ("AC-9 expected shortfall estimator", ac9, None),
        ("AC-10 nonstationary tracking", ac10, None),
        ("AC-11 Shapley moments", ac11, None),
        ("AC-12 replay determinism", ac12, None),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failures = 0;
    for (name, check, budget) in checks {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let mut result = check();
        let elapsed = start.elapsed();
        if let Some(b) = budget {
            if elapsed > b {
                result.passed = false;
                result.detail.push_str(&format!("; over time budget {b:?}"));
            }
        }
        let tag = if result.passed { "PASS" } else { "FAIL" };
        println!("[{tag}] {name} ({:.1}s): {}", elapsed.as_secs_f64(), result.detail);
        failures += usize::from(!result.passed);
    }
    if failures > 0 {
        println!("{failures} acceptance check(s) failed");
        std::process::exit(1);
    }
}
