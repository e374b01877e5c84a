use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use regmkt::data_io::{
    csv_bytes, format_float, ingest_csv, load_json, quarterly_csv, run_replay, shapley_audit, write_atomic,
    AuditConfig, LedgerTable, QuarterlyRow, ReplayConfig, RiskConfig, SimulateConfig,
};
use regmkt::simulation::{
    generate, monte_carlo, posterior_trace, tracking_experiment, MonteCarloReport, SetupKind, SetupSpec,
};
use regmkt::{Error, Hypothesis, MarketDesign, Stage};

const EXIT_RUNTIME: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "regmkt", version, about = "Regression market experiments and replays")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// More log output (-v info, -vv debug); REGMKT_LOG takes precedence.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, created if missing (default: ./out).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for Monte Carlo runs (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Restricts or overrides the market design.
    #[arg(long)]
    design: Option<MarketDesign>,
}

impl Common {
    fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Monte Carlo experiments on synthetic setups.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Restricts the experiment to one setup.
        #[arg(long)]
        setup: Option<SetupKind>,
    },
    /// Online market replay on a time-series CSV.
    Replay {
        #[command(flatten)]
        common: Common,
        /// Input CSV with a timestamp column and one column per entity.
        #[arg(long)]
        data: PathBuf,
        /// Central entity (overrides the configuration).
        #[arg(long)]
        target: Option<String>,
        /// Let every entity take a turn as the central agent.
        #[arg(long)]
        all_central: bool,
    },
    /// Compares the Shapley sum with the permutation average and sweeps budget gaps.
    ShapleyAudit {
        #[command(flatten)]
        common: Common,
        /// Number of support features in the random instance.
        #[arg(long)]
        players: Option<usize>,
        /// Sample size of the random instance.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Expected value and expected shortfall of agent revenues per design.
    RiskReport {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        setup: Option<SetupKind>,
    },
}

/// Failure with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Configuration(_) | Error::InvalidArgument(_) | Error::UnsupportedDesign(_) | Error::Capacity { .. } => {
                EXIT_USAGE
            }
            _ => EXIT_RUNTIME,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("REGMKT_LOG", level)).init();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(command: Command) -> CliResult<u8> {
    match command {
        Command::Simulate { common, setup } => simulate(&common, setup),
        Command::Replay {
            common,
            data,
            target,
            all_central,
        } => replay(&common, &data, target, all_central),
        Command::ShapleyAudit { common, players, n } => audit(&common, players, n),
        Command::RiskReport { common, setup } => risk_report(&common, setup),
    }
}

fn load_config<T: serde::de::DeserializeOwned>(path: Option<&Path>) -> CliResult<Option<T>> {
    match path {
        None => Ok(None),
        Some(p) if !p.is_file() => Err(usage(format!("configuration file {} not found", p.display()))),
        Some(p) => Ok(Some(load_json(p)?)),
    }
}

fn prepare_out(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| Failure {
        code: EXIT_RUNTIME,
        message: format!("cannot create {}: {e}", dir.display()),
    })
}

fn write(dir: &Path, name: &str, bytes: &[u8]) -> CliResult<String> {
    write_atomic(&dir.join(name), bytes)?;
    log::info!("wrote {}", dir.join(name).display());
    Ok(name.to_string())
}

#[derive(Serialize)]
struct Manifest<'a, C: Serialize> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config: &'a C,
    files: Vec<String>,
}

fn write_manifest<C: Serialize>(dir: &Path, command: &str, seed: u64, config: &C, files: Vec<String>) -> CliResult<()> {
    let manifest = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed,
        config,
        files,
    };
    let mut bytes = serde_json::to_vec_pretty(&manifest).map_err(Error::from)?;
    bytes.push(b'\n');
    write(dir, "manifest.json", &bytes)?;
    Ok(())
}

fn f(v: f64) -> String {
    format_float(v)
}

fn opt(v: Option<f64>) -> String {
    v.map(format_float).unwrap_or_default()
}

fn stages(cell: &regmkt::simulation::CellReport) -> Vec<(Stage, &regmkt::simulation::StageStats)> {
    let mut out = vec![(Stage::InSample, &cell.in_sample)];
    if let Some(s) = &cell.out_of_sample {
        out.push((Stage::OutOfSample, s));
    }
    out
}

fn cell_prefix(c: &regmkt::simulation::CellReport, stage: Stage) -> Vec<String> {
    vec![
        c.design.to_string(),
        c.setup.to_string(),
        c.n.to_string(),
        opt(c.sweep),
        stage.name().to_string(),
    ]
}

const CELL_HEADER: [&str; 5] = ["design", "setup", "n", "w2", "stage"];

fn header(extra: &[&'static str]) -> Vec<&'static str> {
    CELL_HEADER.iter().chain(extra).copied().collect()
}

fn shapley_table(report: &MonteCarloReport) -> CliResult<Vec<u8>> {
    let names = regmkt::simulation::feature_names(report.descriptor.true_w.len() - 1);
    let mut rows = Vec::new();
    for c in &report.cells {
        for (stage, s) in stages(c) {
            for (k, v) in s.mean_shapley.iter().enumerate() {
                let mut r = cell_prefix(c, stage);
                r.push(names[k + 1].clone());
                r.push(f(*v));
                rows.push(r);
            }
        }
    }
    Ok(csv_bytes(&header(&["feature", "mean_shapley"]), &rows)?)
}

fn loss_table(report: &MonteCarloReport) -> CliResult<Vec<u8>> {
    let mut rows = Vec::new();
    for c in &report.cells {
        for (stage, s) in stages(c) {
            let mut r = cell_prefix(c, stage);
            r.extend([
                f(s.mean_central_loss),
                f(s.mean_grand_loss),
                f(s.mean_grand_loss / s.mean_central_loss),
                f(s.mean_central_payment),
                f(s.mean_budget_gap),
            ]);
            rows.push(r);
        }
    }
    Ok(csv_bytes(
        &header(&["central_nll", "grand_nll", "nll_ratio", "central_payment", "budget_gap"]),
        &rows,
    )?)
}

fn risk_table(report: &MonteCarloReport) -> CliResult<Vec<u8>> {
    let mut rows = Vec::new();
    for c in &report.cells {
        for (stage, s) in stages(c) {
            for a in &s.agents {
                let r0 = &a.risk;
                let mut r = cell_prefix(c, stage);
                r.extend([
                    a.agent.clone(),
                    f(r0.expected_value),
                    f(r0.expected_shortfall),
                    f(r0.alpha),
                    opt(r0.confidence_interval.map(|c| c.0)),
                    opt(r0.confidence_interval.map(|c| c.1)),
                    opt(r0.shortfall_interval.map(|c| c.0)),
                    opt(r0.shortfall_interval.map(|c| c.1)),
                ]);
                rows.push(r);
            }
        }
    }
    Ok(csv_bytes(
        &header(&[
            "agent",
            "expected_value",
            "expected_shortfall",
            "alpha",
            "ev_ci_low",
            "ev_ci_high",
            "es_ci_low",
            "es_ci_high",
        ]),
        &rows,
    )?)
}

fn resolve_experiment(
    exp: &mut regmkt::simulation::ExperimentDescriptor,
    common: &Common,
    setup: Option<SetupKind>,
) -> CliResult<()> {
    if let Some(s) = common.seed {
        exp.seed = s;
    }
    if let Some(d) = common.design {
        exp.designs = vec![d];
    }
    if let Some(s) = setup {
        exp.setups = vec![s];
    }
    if common.jobs == Some(0) {
        return Err(usage("--jobs must be at least 1"));
    }
    exp.validate()?;
    Ok(())
}

fn simulate(common: &Common, setup: Option<SetupKind>) -> CliResult<u8> {
    let mut cfg: SimulateConfig =
        load_config(common.config.as_deref())?.ok_or_else(|| usage("simulate needs --config"))?;
    resolve_experiment(&mut cfg.experiment, common, setup)?;
    let exp = &cfg.experiment;
    let report = monte_carlo(exp, common.jobs)?;
    let out = &common.out_dir();
    prepare_out(out)?;
    let mut files = vec![
        write(out, "shapley_vs_n.csv", &shapley_table(&report)?)?,
        write(out, "nll_vs_n.csv", &loss_table(&report)?)?,
        write(out, "risk_by_design.csv", &risk_table(&report)?)?,
    ];
    if let Some(trace) = &cfg.trace {
        let spec = SetupSpec::new(trace.setup, exp.true_w.clone(), exp.xi, trace.n, exp.seed);
        let data = generate(&spec)?;
        let h = Hypothesis::linear(spec.n_features(), exp.xi)?
            .with_prior_precision(exp.prior_precision)?
            .with_forgetting(trace.tau)?;
        let path = posterior_trace(&data, &h)?;
        let rows: Vec<Vec<String>> = path
            .iter()
            .enumerate()
            .flat_map(|(t, m)| {
                m.iter()
                    .enumerate()
                    .map(move |(k, v)| vec![(t + 1).to_string(), format!("w{k}"), f(*v)])
            })
            .collect();
        files.push(write(out, "posterior_trace.csv", &csv_bytes(&["t", "coefficient", "posterior_mean"], &rows)?)?);
    }
    if let Some(tr) = &cfg.tracking {
        let mut spec = SetupSpec::new(SetupKind::Baseline, tr.true_w.clone(), tr.xi, tr.n, exp.seed);
        spec.nonstationarity = tr.change;
        let rep = tracking_experiment(&spec, &tr.taus, tr.runs, tr.from, tr.window)?;
        let mut rows = Vec::new();
        for (k, tau) in rep.taus.iter().enumerate() {
            for t in 0..rep.truth.len() {
                rows.push(vec![f(*tau), (t + 1).to_string(), f(rep.truth[t]), f(rep.mean_path[k][t])]);
            }
        }
        files.push(write(out, "tracking_trace.csv", &csv_bytes(&["tau", "t", "true_w2", "mean_posterior_w2"], &rows)?)?);
        let errs: Vec<Vec<String>> = rep
            .taus
            .iter()
            .zip(&rep.mean_abs_error)
            .map(|(t, e)| vec![f(*t), f(*e)])
            .collect();
        files.push(write(out, "tracking_error.csv", &csv_bytes(&["tau", "mean_abs_error"], &errs)?)?);
    }
    write_manifest(out, "simulate", exp.seed, &cfg, files)?;
    println!("simulate: {} cells written to {}", report.cells.len(), out.display());
    Ok(0)
}

fn risk_report(common: &Common, setup: Option<SetupKind>) -> CliResult<u8> {
    let mut cfg: RiskConfig =
        load_config(common.config.as_deref())?.ok_or_else(|| usage("risk-report needs --config"))?;
    resolve_experiment(&mut cfg.experiment, common, setup)?;
    let report = monte_carlo(&cfg.experiment, common.jobs)?;
    let out = &common.out_dir();
    prepare_out(out)?;
    let files = vec![write(out, "risk_by_design.csv", &risk_table(&report)?)?];
    write_manifest(out, "risk-report", cfg.experiment.seed, &cfg, files)?;
    println!("{:<10} {:<20} {:>6} {:<14} {:>6} {:>14} {:>14}", "design", "setup", "n", "stage", "agent", "EV", "ES");
    for c in &report.cells {
        for (stage, s) in stages(c) {
            for a in &s.agents {
                println!(
                    "{:<10} {:<20} {:>6} {:<14} {:>6} {:>14.6e} {:>14.6e}",
                    c.design.to_string(),
                    c.setup.to_string(),
                    c.n,
                    stage.name(),
                    a.agent,
                    a.risk.expected_value,
                    a.risk.expected_shortfall
                );
            }
        }
    }
    Ok(0)
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn replay(common: &Common, data: &Path, target: Option<String>, all_central: bool) -> CliResult<u8> {
    let mut cfg: ReplayConfig = load_config(common.config.as_deref())?.unwrap_or_default();
    if let Some(t) = target {
        cfg.target = Some(t);
    }
    cfg.all_central |= all_central;
    if let Some(s) = common.seed {
        cfg.market.seed = s;
    }
    if let Some(d) = common.design {
        cfg.market.design = d;
    }
    cfg.market.market_config(1)?;
    if !data.is_file() {
        return Err(usage(format!("data file {} not found", data.display())));
    }
    let table = ingest_csv(data, &cfg.schema)?;
    let outcomes = run_replay(&table, &cfg)?;
    let out = &common.out_dir();
    prepare_out(out)?;
    let mut files = Vec::new();
    let mut quarterly: Vec<QuarterlyRow> = Vec::new();
    for o in &outcomes {
        let name = format!("ledger_{}.{}", sanitize(&o.central), cfg.ledger_format.extension());
        let bytes = LedgerTable::from_result(&o.result).to_bytes(cfg.ledger_format)?;
        files.push(write(out, &name, &bytes)?);
        quarterly.extend(o.quarterly.iter().cloned());
        for (agent, rev) in o.result.cumulative_revenues(Stage::InSample) {
            let out_rev = o
                .result
                .cumulative_revenues(Stage::OutOfSample)
                .into_iter()
                .find(|(a, _)| *a == agent)
                .map(|(_, v)| v)
                .unwrap_or(0.0);
            println!(
                "central {:<12} agent {:<12} in-sample {:>14.6e} out-of-sample {:>14.6e}",
                o.central, agent, rev, out_rev
            );
        }
        if !o.pruned.is_empty() {
            println!("central {:<12} pruned basis functions {:?}", o.central, o.pruned);
        }
    }
    files.push(write(out, "quarterly_summary.csv", &quarterly_csv(&quarterly)?)?);
    #[derive(Serialize)]
    struct Resolved<'a> {
        data: String,
        rows: usize,
        dropped_rows: usize,
        replay: &'a ReplayConfig,
    }
    let resolved = Resolved {
        data: data.display().to_string(),
        rows: table.len(),
        dropped_rows: table.dropped_rows,
        replay: &cfg,
    };
    write_manifest(out, "replay", cfg.market.seed, &resolved, files)?;
    Ok(0)
}

fn audit(common: &Common, players: Option<usize>, n: Option<usize>) -> CliResult<u8> {
    let mut cfg: AuditConfig = load_config(common.config.as_deref())?.unwrap_or_default();
    if let Some(p) = players {
        cfg.support_features = p;
    }
    if let Some(n) = n {
        cfg.n = n;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(d) = common.design {
        cfg.designs = Some(vec![d]);
    }
    let report = shapley_audit(&cfg)?;
    println!(
        "{:<10} {:>22} {:>22} {:>22}  status",
        "design", "max_shapley_deviation", "max_relative_gap", "cumulative_gap"
    );
    for l in &report.lines {
        println!(
            "{:<10} {:>22.6e} {:>22.6e} {:>22.6e}  {}",
            l.design.to_string(),
            l.max_shapley_deviation,
            l.max_relative_gap,
            l.cumulative_gap,
            if l.passed { "ok" } else { "FAIL" }
        );
        if !l.design.is_budget_balanced() {
            println!("{:<10} budget gap allowed for this design", "");
        }
    }
    if let Some(out) = &common.out {
        prepare_out(out)?;
        let mut bytes = serde_json::to_vec_pretty(&report).map_err(Error::from)?;
        bytes.push(b'\n');
        write(out, "audit.json", &bytes)?;
    }
    Ok(if report.passed() { 0 } else { EXIT_RUNTIME })
}
