//! CSV ingestion, lagged feature construction, configuration files and
//! ledger/report serialization.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, Datelike, NaiveDate, NaiveDateTime, TimeDelta};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::allocation::MarketDesign;
use crate::bayes::{Dataset, Hypothesis, DEFAULT_PRIOR_PRECISION};
use crate::error::{invalid, Error, Result};
use crate::market::{run_online, select_features, AgentRegistry, ClearingResult, MarketConfig, Stage};
use crate::scoring::order_invariant_mean;
use crate::simulation::{ExperimentDescriptor, Nonstationarity, SetupKind};

/// Which columns of a raw CSV to read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableSchema {
    #[serde(default = "default_timestamp_column")]
    pub timestamp_column: String,
    /// Entity columns to keep; all non-timestamp columns when absent.
    #[serde(default)]
    pub entities: Option<Vec<String>>,
}

fn default_timestamp_column() -> String {
    "timestamp".into()
}

impl Default for TableSchema {
    fn default() -> Self {
        Self {
            timestamp_column: default_timestamp_column(),
            entities: None,
        }
    }
}

/// Time series of one value per entity.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSeriesTable {
    pub timestamps: Vec<NaiveDateTime>,
    pub entities: Vec<String>,
    /// One column per entity.
    pub values: Vec<Vec<f64>>,
    pub dropped_rows: usize,
    /// Modal spacing between consecutive timestamps.
    pub nominal_step: Option<TimeDelta>,
    /// `gaps[i]` is set when row `i` follows a longer-than-nominal spacing.
    pub gaps: Vec<bool>,
}

impl RawSeriesTable {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn entity(&self, name: &str) -> Option<&[f64]> {
        self.entities
            .iter()
            .position(|e| e == name)
            .map(|k| self.values[k].as_slice())
    }
}

pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.naive_utc());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(dt);
        }
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
}

fn is_missing(cell: &str) -> bool {
    matches!(cell.trim().to_ascii_lowercase().as_str(), "" | "na" | "nan" | "null")
}

pub fn ingest_csv(path: &Path, schema: &TableSchema) -> Result<RawSeriesTable> {
    ingest_reader(File::open(path)?, schema)
}

/// Reads a header row followed by one row per timestamp.
pub fn ingest_reader<R: Read>(reader: R, schema: &TableSchema) -> Result<RawSeriesTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .has_headers(true)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let names: Vec<String> = header.iter().map(|h| h.trim().to_string()).collect();
    let header_err = |message: String| Error::Parse { line: 1, message };
    if names.iter().any(|n| n.is_empty()) {
        return Err(header_err("empty column name in header".into()));
    }
    let mut sorted = names.clone();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != names.len() {
        return Err(header_err("duplicate column name in header".into()));
    }
    let ts_col = names
        .iter()
        .position(|n| *n == schema.timestamp_column)
        .ok_or_else(|| header_err(format!("missing timestamp column '{}'", schema.timestamp_column)))?;
    let entities: Vec<String> = match &schema.entities {
        Some(list) => list.clone(),
        None => names.iter().filter(|n| **n != schema.timestamp_column).cloned().collect(),
    };
    if entities.is_empty() {
        return Err(header_err("no entity columns".into()));
    }
    let entity_cols = entities
        .iter()
        .map(|e| {
            names
                .iter()
                .position(|n| n == e)
                .filter(|&k| k != ts_col)
                .ok_or_else(|| header_err(format!("missing entity column '{e}'")))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut timestamps = Vec::new();
    let mut values = vec![Vec::new(); entities.len()];
    let mut dropped = 0;
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let cell = |k: usize| record.get(k).unwrap_or("");
        if is_missing(cell(ts_col)) || entity_cols.iter().any(|&k| is_missing(cell(k))) {
            dropped += 1;
            continue;
        }
        let ts = parse_timestamp(cell(ts_col)).ok_or_else(|| Error::Parse {
            line,
            message: format!("invalid timestamp '{}'", cell(ts_col)),
        })?;
        let mut row = Vec::with_capacity(entity_cols.len());
        for (&k, name) in entity_cols.iter().zip(&entities) {
            let v: f64 = cell(k).trim().parse().map_err(|_| Error::Parse {
                line,
                message: format!("invalid number '{}' in column '{name}'", cell(k)),
            })?;
            if !v.is_finite() {
                return Err(Error::Validation(format!(
                    "non-finite value in column '{name}' at line {line}"
                )));
            }
            row.push(v);
        }
        if let Some(&prev) = timestamps.last() {
            if ts <= prev {
                return Err(Error::Validation(format!(
                    "timestamps are not strictly increasing at line {line} ({ts} after {prev})"
                )));
            }
        }
        timestamps.push(ts);
        for (col, v) in values.iter_mut().zip(row) {
            col.push(v);
        }
    }
    let nominal_step = modal_step(&timestamps);
    let gaps = (0..timestamps.len())
        .map(|i| i > 0 && nominal_step.is_some_and(|s| timestamps[i] - timestamps[i - 1] > s))
        .collect();
    if dropped > 0 {
        log::info!("dropped {dropped} rows with missing cells");
    }
    Ok(RawSeriesTable {
        timestamps,
        entities,
        values,
        dropped_rows: dropped,
        nominal_step,
        gaps,
    })
}

fn modal_step(ts: &[NaiveDateTime]) -> Option<TimeDelta> {
    let mut counts: BTreeMap<TimeDelta, usize> = BTreeMap::new();
    for w in ts.windows(2) {
        *counts.entry(w[1] - w[0]).or_default() += 1;
    }
    // Ties resolve to the smallest spacing.
    counts
        .into_iter()
        .fold(None, |best: Option<(TimeDelta, usize)>, (d, c)| match best {
            Some((_, bc)) if bc >= c => best,
            _ => Some((d, c)),
        })
        .map(|(d, _)| d)
}

/// Market parameters of a replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketSettings {
    #[serde(default = "default_replay_design")]
    pub design: MarketDesign,
    #[serde(default = "default_replay_tau")]
    pub tau: f64,
    #[serde(default = "default_replay_lambda_in")]
    pub lambda_in: f64,
    #[serde(default = "default_replay_lambda_out")]
    pub lambda_out: f64,
    #[serde(default = "default_one")]
    pub xi: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_replay_design() -> MarketDesign {
    MarketDesign::BlrKlV
}
fn default_replay_tau() -> f64 {
    0.998
}
fn default_replay_lambda_in() -> f64 {
    50.0
}
fn default_replay_lambda_out() -> f64 {
    150.0
}
fn default_one() -> f64 {
    1.0
}
fn default_gamma() -> f64 {
    DEFAULT_PRIOR_PRECISION
}
fn default_alpha() -> f64 {
    0.05
}

impl Default for MarketSettings {
    fn default() -> Self {
        Self {
            design: default_replay_design(),
            tau: default_replay_tau(),
            lambda_in: default_replay_lambda_in(),
            lambda_out: default_replay_lambda_out(),
            xi: 1.0,
            gamma: default_gamma(),
            alpha: default_alpha(),
            seed: 0,
        }
    }
}

impl MarketSettings {
    /// Linear hypothesis over `n_columns` inputs plus the dummy.
    pub fn market_config(&self, n_columns: usize) -> Result<MarketConfig> {
        let hypothesis = Hypothesis::linear(n_columns, self.xi)?
            .with_prior_precision(self.gamma)?
            .with_forgetting(self.tau)?;
        let config = MarketConfig {
            design: self.design,
            lambda_in: self.lambda_in,
            lambda_out: self.lambda_out,
            hypothesis,
            alpha: self.alpha,
            seed: self.seed,
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplaySpec {
    pub target: String,
    #[serde(default = "default_lags")]
    pub lags: usize,
    #[serde(default)]
    pub market: MarketSettings,
}

fn default_lags() -> usize {
    1
}

/// Lag features `<entity>_lag<l>` for `l = 1..=lags` of every entity.
///
/// The target's own lags go to the central agent (named after the target)
/// together with the dummy; each other entity's lags go to an agent named
/// after that entity. Row `t` uses only values strictly before `t`.
pub fn build_lagged_dataset(table: &RawSeriesTable, spec: &ReplaySpec) -> Result<(Dataset, AgentRegistry)> {
    let target = table
        .entity(&spec.target)
        .ok_or_else(|| invalid(format!("target entity '{}' is not in the table", spec.target)))?;
    if spec.lags == 0 {
        return Err(invalid("lag order must be at least 1"));
    }
    let n = table.len();
    if spec.lags >= n {
        return Err(invalid(format!(
            "lag order {} needs more than {n} rows",
            spec.lags
        )));
    }
    let mut columns = Vec::new();
    let mut owners: Vec<&str> = Vec::new();
    for lag in 1..=spec.lags {
        for e in &table.entities {
            columns.push(format!("{e}_lag{lag}"));
            owners.push(e);
        }
    }
    let mut rows = Vec::with_capacity(n - spec.lags);
    let mut targets = Vec::with_capacity(n - spec.lags);
    let mut gap_flags = Vec::with_capacity(n - spec.lags);
    for t in spec.lags..n {
        let mut row = Vec::with_capacity(columns.len());
        for lag in 1..=spec.lags {
            for col in &table.values {
                row.push(col[t - lag]);
            }
        }
        rows.push(row);
        targets.push(target[t]);
        gap_flags.push(table.gaps[t + 1 - spec.lags..=t].iter().any(|&g| g));
    }
    let mut data = Dataset::from_rows(rows, targets, columns)?;
    data.timestamps = Some(table.timestamps[spec.lags..].to_vec());
    data.gap_flags = gap_flags;

    // Basis index = column index + 1.
    let mut central = vec![0];
    let mut supports: Vec<(String, Vec<usize>)> = Vec::new();
    for (j, owner) in owners.iter().enumerate() {
        if *owner == spec.target {
            central.push(j + 1);
        } else if let Some(entry) = supports.iter_mut().find(|(id, _)| id == owner) {
            entry.1.push(j + 1);
        } else {
            supports.push((owner.to_string(), vec![j + 1]));
        }
    }
    let registry = AgentRegistry::new(spec.target.clone(), central, supports)?;
    Ok((data, registry))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LedgerFormat {
    Csv,
    Json,
}

impl LedgerFormat {
    pub fn extension(&self) -> &'static str {
        match self {
            LedgerFormat::Csv => "csv",
            LedgerFormat::Json => "json",
        }
    }
}

/// Full-precision decimal form that parses back to the same `f64`.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// A ledger as written to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerTable {
    pub columns: Vec<String>,
    pub rows: Vec<LedgerRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerRecord {
    pub t: usize,
    pub stage: Stage,
    pub design: MarketDesign,
    /// `pi_c`, then per-agent revenue, then per-feature expected Shapley value.
    pub values: Vec<f64>,
}

impl LedgerTable {
    pub fn from_result(result: &ClearingResult) -> Self {
        let mut columns: Vec<String> = ["t", "stage", "design", "pi_c"].iter().map(|s| s.to_string()).collect();
        columns.extend(result.agents.iter().map(|a| format!("pi_{a}")));
        columns.extend(result.feature_names.iter().map(|f| format!("E_phi_{f}")));
        let rows = result
            .rows()
            .into_iter()
            .map(|r| {
                let mut values = vec![r.pi_c];
                values.extend(r.revenues.iter().map(|(_, v)| *v));
                values.extend(&r.expected_shapley);
                LedgerRecord {
                    t: r.t,
                    stage: r.stage,
                    design: r.design,
                    values,
                }
            })
            .collect();
        Self { columns, rows }
    }

    pub fn to_bytes(&self, format: LedgerFormat) -> Result<Vec<u8>> {
        match format {
            LedgerFormat::Json => {
                let mut out = serde_json::to_vec_pretty(self)?;
                out.push(b'\n');
                Ok(out)
            }
            LedgerFormat::Csv => {
                let mut w = csv::Writer::from_writer(Vec::new());
                w.write_record(&self.columns)?;
                for r in &self.rows {
                    let mut rec = vec![r.t.to_string(), r.stage.name().to_string(), r.design.to_string()];
                    rec.extend(r.values.iter().map(|&v| format_float(v)));
                    w.write_record(&rec)?;
                }
                w.into_inner().map_err(|e| Error::Io(e.into_error()))
            }
        }
    }

    pub fn from_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let columns: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
        if columns.len() < 4 || columns[..4] != ["t", "stage", "design", "pi_c"] {
            return Err(Error::Parse {
                line: 1,
                message: "not a ledger header".into(),
            });
        }
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
            let perr = |m: String| Error::Parse { line, message: m };
            if rec.len() != columns.len() {
                return Err(perr("wrong number of fields".into()));
            }
            rows.push(LedgerRecord {
                t: rec[0].parse().map_err(|_| perr(format!("invalid t '{}'", &rec[0])))?,
                stage: Stage::parse(&rec[1]).map_err(|e| perr(e.to_string()))?,
                design: rec[2].parse().map_err(|e: Error| perr(e.to_string()))?,
                values: rec
                    .iter()
                    .skip(3)
                    .map(|v| v.parse::<f64>().map_err(|_| perr(format!("invalid number '{v}'"))))
                    .collect::<Result<_>>()?,
            });
        }
        Ok(Self { columns, rows })
    }
}

pub fn write_ledger(result: &ClearingResult, path: &Path, format: LedgerFormat) -> Result<()> {
    write_atomic(path, &LedgerTable::from_result(result).to_bytes(format)?)
}

pub fn read_ledger(path: &Path) -> Result<LedgerTable> {
    let file = File::open(path)?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => Ok(serde_json::from_reader(std::io::BufReader::new(file))?),
        _ => LedgerTable::from_csv(file),
    }
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        // Temporary files are created owner-only; outputs are ordinary files.
        tmp.as_file().set_permissions(std::fs::Permissions::from_mode(0o644))?;
    }
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Tidy CSV with a header row.
pub fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Configuration(format!("{}: {e}", path.display())))
}

/// One row per central entity and calendar quarter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuarterlyRow {
    pub central: String,
    pub quarter: String,
    pub steps: usize,
    /// Mean relative NLL improvement of the grand coalition over the central
    /// agent's own model, in-sample.
    pub in_sample: f64,
    pub out_of_sample: Option<f64>,
}

/// Relative improvement `(E[ℓ_{I_c}] − E[ℓ_I]) / |E[ℓ_I]|` averaged per quarter.
pub fn quarterly_summary(
    result: &ClearingResult,
    timestamps: &[NaiveDateTime],
    central: &str,
) -> Vec<QuarterlyRow> {
    let quarter_of = |t: usize| {
        let ts = timestamps[t - 1];
        format!("{}Q{}", ts.year(), (ts.month() - 1) / 3 + 1)
    };
    let improvement = |objective: &[f64]| {
        let own = objective[0];
        let grand = objective[objective.len() - 1];
        if grand == 0.0 {
            0.0
        } else {
            (own - grand) / grand.abs()
        }
    };
    let mut by_quarter: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in &result.in_sample {
        by_quarter.entry(quarter_of(r.t)).or_default().0.push(improvement(&r.objective));
    }
    for r in &result.out_of_sample {
        by_quarter.entry(quarter_of(r.t)).or_default().1.push(improvement(&r.objective));
    }
    by_quarter
        .into_iter()
        .map(|(quarter, (ins, outs))| QuarterlyRow {
            central: central.to_string(),
            quarter,
            steps: ins.len(),
            in_sample: order_invariant_mean(&ins),
            out_of_sample: (!outs.is_empty()).then(|| order_invariant_mean(&outs)),
        })
        .collect()
}

pub fn quarterly_csv(rows: &[QuarterlyRow]) -> Result<Vec<u8>> {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.central.clone(),
                r.quarter.clone(),
                r.steps.to_string(),
                format_float(r.in_sample),
                r.out_of_sample.map(format_float).unwrap_or_default(),
            ]
        })
        .collect();
    csv_bytes(&["central", "quarter", "steps", "in_sample", "out_of_sample"], &body)
}

/// Replay configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayConfig {
    /// Central entity; ignored when `all_central` is set.
    #[serde(default)]
    pub target: Option<String>,
    #[serde(default)]
    pub all_central: bool,
    #[serde(default = "default_lags")]
    pub lags: usize,
    #[serde(default)]
    pub schema: TableSchema,
    #[serde(default)]
    pub market: MarketSettings,
    /// Prune support features on a trailing validation window first.
    #[serde(default)]
    pub validation_fraction: Option<f64>,
    #[serde(default = "default_ledger_format")]
    pub ledger_format: LedgerFormat,
}

fn default_ledger_format() -> LedgerFormat {
    LedgerFormat::Csv
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self {
            target: None,
            all_central: false,
            lags: 1,
            schema: TableSchema::default(),
            market: MarketSettings::default(),
            validation_fraction: None,
            ledger_format: LedgerFormat::Csv,
        }
    }
}

/// Result of one central-agent assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayOutcome {
    pub central: String,
    pub registry: AgentRegistry,
    pub pruned: Vec<usize>,
    pub result: ClearingResult,
    pub quarterly: Vec<QuarterlyRow>,
}

/// Runs the online market for each central entity requested by `config`.
pub fn run_replay(table: &RawSeriesTable, config: &ReplayConfig) -> Result<Vec<ReplayOutcome>> {
    let centrals: Vec<String> = if config.all_central {
        table.entities.clone()
    } else {
        match &config.target {
            Some(t) => vec![t.clone()],
            None => vec![table
                .entities
                .first()
                .cloned()
                .ok_or_else(|| Error::Configuration("table has no entities".into()))?],
        }
    };
    centrals
        .into_iter()
        .map(|central| {
            let spec = ReplaySpec {
                target: central.clone(),
                lags: config.lags,
                market: config.market.clone(),
            };
            let (data, registry) = build_lagged_dataset(table, &spec)?;
            let market = config.market.market_config(data.n_columns())?;
            let (registry, pruned) = match config.validation_fraction {
                Some(f) => {
                    let s = select_features(&data, &registry, &market.hypothesis, f)?;
                    (s.registry, s.pruned)
                }
                None => (registry, Vec::new()),
            };
            let result = run_online(&data, &market, &registry)?;
            let quarterly = quarterly_summary(&result, data.timestamps.as_deref().unwrap_or(&[]), &central);
            Ok(ReplayOutcome {
                central,
                registry,
                pruned,
                result,
                quarterly,
            })
        })
        .collect()
}

/// Online posterior trace to export alongside a simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSettings {
    pub setup: SetupKind,
    pub n: usize,
    #[serde(default = "default_one")]
    pub tau: f64,
}

/// Nonstationary tracking comparison to export alongside a simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackingSettings {
    pub true_w: Vec<f64>,
    pub xi: f64,
    pub n: usize,
    pub change: Nonstationarity,
    pub taus: Vec<f64>,
    pub runs: usize,
    pub from: usize,
    pub window: usize,
}

/// Simulation configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateConfig {
    pub experiment: ExperimentDescriptor,
    #[serde(default)]
    pub trace: Option<TraceSettings>,
    #[serde(default)]
    pub tracking: Option<TrackingSettings>,
}

/// Shapley audit configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditConfig {
    #[serde(default = "default_players")]
    pub support_features: usize,
    #[serde(default = "default_audit_n")]
    pub n: usize,
    #[serde(default)]
    pub designs: Option<Vec<MarketDesign>>,
    #[serde(default = "default_one")]
    pub xi: f64,
    #[serde(default = "default_audit_tau")]
    pub tau: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_shapley_tol")]
    pub shapley_tolerance: f64,
    #[serde(default = "default_gap_tol")]
    pub gap_tolerance: f64,
    /// Replacement Shapley weight table, for checking that the audit fails.
    #[serde(default)]
    pub weight_override: Option<Vec<f64>>,
}

fn default_players() -> usize {
    3
}
fn default_audit_n() -> usize {
    10
}
fn default_audit_tau() -> f64 {
    0.99
}
fn default_shapley_tol() -> f64 {
    1e-12
}
fn default_gap_tol() -> f64 {
    1e-9
}

impl Default for AuditConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

/// Risk report configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskConfig {
    pub experiment: ExperimentDescriptor,
}

/// Per-design outcome of a Shapley audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditLine {
    pub design: MarketDesign,
    /// Largest `|weighted-subset − permutation average|` over steps and features.
    pub max_shapley_deviation: f64,
    /// Largest per-step `|π_c − Σπ_a| / max(1, |π_c|)` over both stages.
    pub max_relative_gap: f64,
    /// `Σ_t (π_c − Σπ_a)` over the in-sample ledger.
    pub cumulative_gap: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub config: AuditConfig,
    pub lines: Vec<AuditLine>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.lines.iter().all(|l| l.passed)
    }
}

/// Checks the Shapley sum against the permutation oracle and sweeps budget
/// gaps on a random linear instance with `support_features` sellers.
pub fn shapley_audit(config: &AuditConfig) -> Result<AuditReport> {
    use crate::allocation::{audit::permutation_shapley, shapley_values, CoalitionCache, ShapleyWeights};
    use crate::bayes::{batch_posterior, mle_fit, mle_predictive, predictive, prior_for_coalition};
    use crate::market::MarketState;
    use crate::simulation::{generate, simulation_registry, SetupSpec};
    use rand::{Rng, SeedableRng};

    let n_players = config.support_features;
    if n_players == 0 || n_players > 10 {
        return Err(Error::Configuration(format!(
            "support_features must lie in 1..=10, got {n_players}"
        )));
    }
    if config.n < 2 {
        return Err(Error::Configuration("n must be at least 2".into()));
    }
    let p = n_players + 1;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed);
    let true_w: Vec<f64> = (0..=p).map(|_| rng.random_range(-1.0..1.0)).collect();
    let data = generate(&SetupSpec::new(SetupKind::Baseline, true_w, config.xi, config.n, config.seed))?;
    let registry = simulation_registry(p)?;
    let settings = MarketSettings {
        tau: config.tau,
        xi: config.xi,
        seed: config.seed,
        ..MarketSettings::default()
    };
    let weights = match &config.weight_override {
        Some(table) => ShapleyWeights::from_table(table.clone())?,
        None => ShapleyWeights::standard(n_players)?,
    };
    if weights.n_players() != n_players {
        return Err(Error::Configuration(format!(
            "weight table has {} entries for {n_players} players",
            weights.n_players()
        )));
    }
    let designs = config.designs.clone().unwrap_or_else(|| MarketDesign::ALL.to_vec());
    let mut lines = Vec::new();
    for design in designs {
        let market = MarketSettings { design, ..settings.clone() }.market_config(p)?;
        let h = &market.hypothesis;

        // Fixed full-sample fits, one predictive per coalition and point.
        let mut cache = CoalitionCache::new(design.family(), registry.central_features(), registry.support_features())?;
        let coalitions: Vec<Vec<usize>> = (0..cache.n_masks()).map(|m| cache.coalition_basis(m)).collect();
        let mut models = Vec::new();
        for c in &coalitions {
            models.push(match design.family() {
                crate::allocation::ModelFamily::Bayesian => {
                    let prior = prior_for_coalition(c, h.prior_precision)?;
                    Ok(batch_posterior(&prior, &h.design_matrix(&data, c)?, &data.targets, h.noise_precision)?)
                }
                crate::allocation::ModelFamily::Frequentist => Err(mle_fit(&data, c, h)?.coefficients),
            });
        }
        let mut deviation = 0.0f64;
        for t in 0..data.len() {
            let preds = coalitions
                .iter()
                .zip(&models)
                .map(|(c, m)| {
                    let psi = h.basis_row(data.row(t), c);
                    match m {
                        Ok(post) => predictive(post, &psi, h.noise_precision),
                        Err(w) => mle_predictive(w.as_slice(), &psi, h.noise_precision),
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            cache.push_step(data.targets[t], preds)?;
            let fast = shapley_values(design, t, &cache, &weights)?;
            let slow = permutation_shapley(design, t, &cache)?;
            for (a, b) in fast.iter().zip(&slow) {
                deviation = deviation.max((a - b).abs());
            }
        }

        let mut state = MarketState::new(&market, &registry)?;
        state.set_weights(weights.clone())?;
        let mut max_gap = 0.0f64;
        let mut in_gaps = Vec::new();
        for i in 0..data.len() {
            for stage in [Stage::OutOfSample, Stage::InSample] {
                if let Some((row, _)) = state.clear_step(stage, i + 1, data.row(i), data.targets[i])? {
                    let gap = row.budget_gap();
                    max_gap = max_gap.max(gap.abs() / row.pi_c.abs().max(1.0));
                    if stage == Stage::InSample {
                        in_gaps.push(gap);
                    }
                }
            }
        }
        let shapley_ok = deviation.is_finite() && deviation <= config.shapley_tolerance;
        let gap_ok = !design.is_budget_balanced() || max_gap <= config.gap_tolerance;
        lines.push(AuditLine {
            design,
            max_shapley_deviation: deviation,
            max_relative_gap: max_gap,
            cumulative_gap: crate::scoring::order_invariant_sum(&in_gaps),
            passed: shapley_ok && gap_ok,
        });
    }
    Ok(AuditReport {
        config: config.clone(),
        lines,
    })
}
