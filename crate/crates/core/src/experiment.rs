//! Experiment orchestration: configuration, replicate scheduling,
//! aggregation and report files.
//!
//! Every replicate draws from streams keyed by `(master_seed, purpose,
//! replicate index)`, and rows are emitted in replicate order, so the output
//! does not depend on the number of workers.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::delaunay::{anchored_edges, anchored_triples, boundary_stability_check, triangulate};
use crate::error::{Error, Result};
use crate::fbf::{sample_field_capped, FieldParams};
use crate::normality::{ks_distance_sorted, normality_tests, summarize, NormalityReport, Summary};
use crate::pointprocess::{sample_poisson_capped, Window};
use crate::qvstats::{
    compute_v2, compute_v3, conditional_second_moment_v2, conditional_second_moment_v3, contraction_norm_v2,
    reindex, support,
};
use crate::rng::StreamKey;
use crate::typical::{
    couple_from_cell, estimate_intensities, sample_typical_cell, typical_edge_cdf, write_cell_draws_csv,
    write_couple_draws_csv, TypicalCellDraw, DEFAULT_QUADRATURE_SIZE,
};
use crate::varints::{estimate_sigma_v2, write_outer_draws_csv, OuterDraw, ProposalParams, VarianceBreakdown};
use crate::verify::{
    check_corr_asymptotics, check_corr_envelope, check_exp_moment_bound, check_p2n_bounds, neighbor_sweep,
    LemmaReport,
};

/// Environment variable holding the worker count.
pub const WORKERS_ENV: &str = "FBFQV_WORKERS";

/// Minimum simulation margin when none is configured.
pub const MIN_DEFAULT_MARGIN: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    CltV2,
    CltV3,
    Typical,
    Variance,
    VerifyLemmas,
    Intensities,
}

impl ExperimentKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentKind::CltV2 => "clt-v2",
            ExperimentKind::CltV3 => "clt-v3",
            ExperimentKind::Typical => "typical",
            ExperimentKind::Variance => "variance",
            ExperimentKind::VerifyLemmas => "verify-lemmas",
            ExperimentKind::Intensities => "intensities",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Caps {
    /// Expected number of Poisson points per replicate.
    pub max_expected_points: f64,
    /// Sites in one covariance factorization.
    pub max_field_points: usize,
    /// Edges in one contraction computation.
    pub max_contraction_edges: usize,
    /// Replicates not started before this many seconds are recorded as
    /// errors.
    pub max_wall_seconds: Option<f64>,
}

impl Default for Caps {
    fn default() -> Self {
        Self {
            max_expected_points: 1e6,
            max_field_points: 10_000,
            max_contraction_edges: 30_000,
            max_wall_seconds: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CltSettings {
    /// Compute both V2 and V3 from every field draw.
    pub joint: bool,
    /// Add the conditional second moment given the points to each row.
    pub conditional_moments: bool,
    /// Emit a `contraction` row per replicate.
    pub contraction: bool,
}

impl Default for CltSettings {
    fn default() -> Self {
        Self {
            joint: false,
            conditional_moments: true,
            contraction: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TypicalSettings {
    /// Typical cells drawn from the Palm density.
    pub cell_draws: usize,
    pub quadrature_size: usize,
}

impl Default for TypicalSettings {
    fn default() -> Self {
        Self {
            cell_draws: 20_000,
            quadrature_size: DEFAULT_QUADRATURE_SIZE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VarianceSettings {
    /// Inner replicates per neighbor probability; the outer count is
    /// `replicates`.
    pub inner: usize,
    pub proposal: ProposalParams,
}

impl Default for VarianceSettings {
    fn default() -> Self {
        Self {
            inner: 200,
            proposal: ProposalParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LemmaSettings {
    pub increment_lengths: [f64; 2],
    /// Directions `k π / angle_steps`, `k = 0..2 angle_steps`.
    pub angle_steps: usize,
    pub distances: Vec<f64>,
    pub envelope_epsilon: f64,
    pub envelope_samples: usize,
    pub sweep_size: usize,
    pub sweep_radii: [f64; 2],
    pub sweep_inner: usize,
    pub moment_alphas: Vec<f64>,
    pub moment_d0: f64,
    pub moment_n: Vec<f64>,
}

impl Default for LemmaSettings {
    fn default() -> Self {
        Self {
            increment_lengths: [1.0, 1.0],
            angle_steps: 6,
            distances: vec![10.0, 100.0, 1000.0],
            envelope_epsilon: 0.25,
            envelope_samples: 100_000,
            sweep_size: 20,
            sweep_radii: [0.3, 4.0],
            sweep_inner: 20_000,
            moment_alphas: vec![0.3, 0.5, 0.8],
            moment_d0: 1.0,
            moment_n: vec![1e3, 1e4, 1e6],
        }
    }
}

fn default_hurst() -> f64 {
    0.25
}
fn default_scale_sq() -> f64 {
    1.0
}
fn default_anchor_side() -> f64 {
    40.0
}
fn default_replicates() -> usize {
    100
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    #[serde(default = "default_hurst")]
    pub hurst: f64,
    #[serde(default = "default_scale_sq")]
    pub scale_sq: f64,
    #[serde(default = "default_anchor_side")]
    pub anchor_side: f64,
    /// Defaults to `max(10, 4 √ln(anchor_side²))`.
    #[serde(default)]
    pub margin: Option<f64>,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub caps: Caps,
    #[serde(default)]
    pub clt: CltSettings,
    #[serde(default)]
    pub typical: TypicalSettings,
    #[serde(default)]
    pub variance: VarianceSettings,
    #[serde(default)]
    pub lemmas: LemmaSettings,
}

impl ExperimentConfig {
    pub fn new(experiment: ExperimentKind) -> Self {
        Self {
            experiment,
            hurst: default_hurst(),
            scale_sq: default_scale_sq(),
            anchor_side: default_anchor_side(),
            margin: None,
            replicates: default_replicates(),
            master_seed: 0,
            output_dir: default_output_dir(),
            caps: Caps::default(),
            clt: CltSettings::default(),
            typical: TypicalSettings::default(),
            variance: VarianceSettings::default(),
            lemmas: LemmaSettings::default(),
        }
    }

    /// Parses a JSON document, applies `key=value` overrides (dotted keys
    /// reach nested sections; values are read as JSON, else as strings) and
    /// validates the result.
    pub fn from_json_with_overrides(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut doc: Value = serde_json::from_str(text).map_err(|e| Error::Config(vec![format!("config: {e}")]))?;
        for (key, raw) in overrides {
            set_path(&mut doc, key, parse_override(raw))?;
        }
        let config: Self = serde_json::from_value(doc).map_err(|e| Error::Config(vec![e.to_string()]))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_json_with_overrides(text, &[])
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.hurst > 0.0 && self.hurst < 1.0) {
            bad.push(format!("hurst must lie in (0, 1), got {}", self.hurst));
        }
        let needs_small_hurst = matches!(self.experiment, ExperimentKind::Variance | ExperimentKind::VerifyLemmas);
        if needs_small_hurst && !(self.hurst < 0.5) {
            bad.push(format!("hurst must be < 0.5 for {}, got {}", self.experiment.as_str(), self.hurst));
        }
        if !(self.scale_sq > 0.0 && self.scale_sq.is_finite()) {
            bad.push(format!("scale_sq must be > 0, got {}", self.scale_sq));
        }
        if !(self.anchor_side > 0.0 && self.anchor_side.is_finite()) {
            bad.push(format!("anchor_side must be > 0, got {}", self.anchor_side));
        }
        if let Some(m) = self.margin {
            if !(m >= 0.0 && m.is_finite()) {
                bad.push(format!("margin must be >= 0, got {m}"));
            }
        }
        if self.replicates == 0 {
            bad.push("replicates must be >= 1".into());
        }
        if self.output_dir.as_os_str().is_empty() {
            bad.push("output_dir must not be empty".into());
        }
        let caps = &self.caps;
        if !(caps.max_expected_points > 0.0) {
            bad.push("caps.max_expected_points must be > 0".into());
        }
        if caps.max_field_points == 0 || caps.max_contraction_edges == 0 {
            bad.push("caps.max_field_points and caps.max_contraction_edges must be >= 1".into());
        }
        if let Some(w) = caps.max_wall_seconds {
            if !(w > 0.0) {
                bad.push(format!("caps.max_wall_seconds must be > 0, got {w}"));
            }
        }
        if self.typical.quadrature_size == 0 {
            bad.push("typical.quadrature_size must be >= 1".into());
        }
        if self.variance.inner == 0 {
            bad.push("variance.inner must be >= 1".into());
        }
        let lemmas = &self.lemmas;
        if lemmas.increment_lengths.iter().any(|l| !(*l > 0.0)) {
            bad.push("lemmas.increment_lengths must be > 0".into());
        }
        if lemmas.angle_steps == 0 || lemmas.distances.is_empty() {
            bad.push("lemmas.angle_steps and lemmas.distances must be non-empty".into());
        }
        if lemmas.sweep_size == 0 || lemmas.sweep_inner == 0 || lemmas.envelope_samples == 0 {
            bad.push("lemmas.sweep_size, lemmas.sweep_inner and lemmas.envelope_samples must be >= 1".into());
        }
        if lemmas.moment_alphas.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            bad.push("lemmas.moment_alphas must lie in (0, 1)".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }

    pub fn effective_margin(&self) -> f64 {
        self.margin.unwrap_or_else(|| {
            let expected = (self.anchor_side * self.anchor_side).max(std::f64::consts::E);
            MIN_DEFAULT_MARGIN.max(4.0 * expected.ln().sqrt())
        })
    }

    pub fn alpha(&self) -> f64 {
        2.0 * self.hurst
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn sha256(&self) -> Result<String> {
        let bytes = serde_json::to_vec(self)?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }

    fn window(&self) -> Result<Window> {
        Window::centered(self.anchor_side, self.effective_margin())
    }
}

fn parse_override(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (depth, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(Error::Config(vec![format!("override key `{key}` has an empty component")]));
        }
        let Value::Object(map) = node else {
            return Err(Error::Config(vec![format!("override `{key}`: `{}` is not a section", parts[..depth].join("."))]));
        };
        if depth + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Err(Error::Config(vec!["empty override key".into()]))
}

/// Reads the worker count from [`WORKERS_ENV`], if set.
pub fn workers_from_env() -> Result<Option<usize>> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(Error::Config(vec![format!("{WORKERS_ENV} must be a positive integer, got `{v}`")])),
        },
        Err(_) => Ok(None),
    }
}

/// One line of `rows.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub replicate: usize,
    pub seed: u64,
    pub kind: String,
    pub n_terms: usize,
    pub value: f64,
    pub cond_second_moment: Option<f64>,
    pub dropped_triples: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckOutcome {
    Pass,
    Fail,
    Inconclusive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub outcome: CheckOutcome,
    pub detail: String,
}

impl Check {
    fn new(name: &str, outcome: CheckOutcome, detail: String) -> Self {
        Self {
            name: name.into(),
            outcome,
            detail,
        }
    }

    fn of(name: &str, pass: bool, detail: String) -> Self {
        Self::new(name, if pass { CheckOutcome::Pass } else { CheckOutcome::Fail }, detail)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Passed,
    /// A statistical check failed.
    Rejected,
    /// Some check could not be evaluated (e.g. too few replicates).
    Inconclusive,
    /// Some replicate failed; the report is partial.
    Error,
}

impl RunStatus {
    /// 0 when every check passed, 2 for a rejected or inconclusive check,
    /// 1 for an execution error.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunStatus::Passed => 0,
            RunStatus::Rejected | RunStatus::Inconclusive => 2,
            RunStatus::Error => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicateError {
    pub replicate: usize,
    pub message: String,
}

/// Summary and normality tests of one row kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatisticReport {
    pub summary: Summary,
    pub tests: Option<NormalityReport>,
    /// Why `tests` is missing.
    pub note: Option<String>,
}

impl StatisticReport {
    fn from_values(values: &[f64]) -> Result<Self> {
        let summary = summarize(values)?;
        Ok(match normality_tests(values) {
            Ok(t) => Self {
                summary,
                tests: Some(t),
                note: None,
            },
            Err(Error::Degenerate(msg)) => Self {
                summary,
                tests: None,
                note: Some(msg),
            },
            Err(e) => return Err(e),
        })
    }

    /// Standard error of the mean; NaN below two values.
    pub fn std_error(&self) -> f64 {
        if self.summary.n < 2 {
            f64::NAN
        } else {
            (self.summary.variance / self.summary.n as f64).sqrt()
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub dropped_triples: usize,
    pub boundary_violations: usize,
    pub replicates_with_boundary_violations: usize,
    /// Count of factorizations per relative jitter level.
    pub jitter_levels: BTreeMap<String, usize>,
    pub pivoted_factorizations: usize,
    pub max_condition_estimate: f64,
    pub max_v3_form_discrepancy: f64,
    pub mean_field_sites: f64,
    /// Experiment-specific scalars.
    pub values: BTreeMap<String, f64>,
}

/// Pass flag and case count of one lemma report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaOverview {
    pub file: String,
    pub lemma_id: String,
    pub pass: bool,
    pub cases: usize,
    pub failing_cases: usize,
    pub summary: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub config_sha256: String,
    pub status: RunStatus,
    pub statistics: BTreeMap<String, StatisticReport>,
    pub checks: Vec<Check>,
    pub diagnostics: Diagnostics,
    pub errors: Vec<ReplicateError>,
    #[serde(default)]
    pub variance: Option<VarianceBreakdown>,
    #[serde(default)]
    pub lemmas: Vec<LemmaOverview>,
    pub elapsed_seconds: f64,
    #[serde(skip)]
    pub rows: Vec<Row>,
    /// Full lemma reports keyed by file stem.
    #[serde(skip)]
    pub lemma_reports: Vec<(String, LemmaReport)>,
    #[serde(skip)]
    pub outer_draws: Vec<OuterDraw>,
    #[serde(skip)]
    pub cell_draws: Vec<TypicalCellDraw>,
}

pub const ROWS_FILE: &str = "rows.csv";
pub const REPORT_FILE: &str = "report.json";

impl ExperimentReport {
    fn new(config: &ExperimentConfig) -> Result<Self> {
        Ok(Self {
            config: config.clone(),
            config_sha256: config.sha256()?,
            status: RunStatus::Passed,
            statistics: BTreeMap::new(),
            checks: Vec::new(),
            diagnostics: Diagnostics::default(),
            errors: Vec::new(),
            variance: None,
            lemmas: Vec::new(),
            elapsed_seconds: 0.0,
            rows: Vec::new(),
            lemma_reports: Vec::new(),
            outer_draws: Vec::new(),
            cell_draws: Vec::new(),
        })
    }

    pub fn statistic(&self, kind: &str) -> Option<&StatisticReport> {
        self.statistics.get(kind)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    /// Values of the rows of one kind, in replicate order.
    pub fn values(&self, kind: &str) -> Vec<f64> {
        self.rows.iter().filter(|r| r.kind == kind).map(|r| r.value).collect()
    }

    fn finish(&mut self) {
        self.status = if !self.errors.is_empty() {
            RunStatus::Error
        } else if self.checks.iter().any(|c| c.outcome == CheckOutcome::Fail) {
            RunStatus::Rejected
        } else if self.checks.iter().any(|c| c.outcome == CheckOutcome::Inconclusive) {
            RunStatus::Inconclusive
        } else {
            RunStatus::Passed
        };
    }

    pub fn write_rows<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row)?;
        }
        if self.rows.is_empty() {
            w.write_record([
                "replicate",
                "seed",
                "kind",
                "n_terms",
                "value",
                "cond_second_moment",
                "dropped_triples",
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `rows.csv`, `report.json`, lemma reports and per-experiment
    /// draw files into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.write_rows(fs::File::create(dir.join(ROWS_FILE))?)?;
        fs::write(dir.join(REPORT_FILE), serde_json::to_string_pretty(self)?)?;
        for (stem, lemma) in &self.lemma_reports {
            fs::write(dir.join(format!("{stem}.json")), lemma.to_json()?)?;
        }
        if !self.outer_draws.is_empty() {
            write_outer_draws_csv(&self.outer_draws, fs::File::create(dir.join("outer_draws.csv"))?)?;
        }
        if !self.cell_draws.is_empty() {
            write_cell_draws_csv(&self.cell_draws, fs::File::create(dir.join("typical_cells.csv"))?)?;
            let couples: Vec<_> = self.cell_draws.iter().map(couple_from_cell).collect();
            write_couple_draws_csv(&couples, fs::File::create(dir.join("typical_couples.csv"))?)?;
        }
        Ok(())
    }

    /// Reads a report and its rows, and checks that every summary equals its
    /// recomputation from the rows.
    pub fn load(dir: &Path) -> Result<Self> {
        let mut report: Self = serde_json::from_str(&fs::read_to_string(dir.join(REPORT_FILE))?)?;
        let mut reader = csv::Reader::from_path(dir.join(ROWS_FILE))?;
        report.rows = reader.deserialize().collect::<std::result::Result<Vec<Row>, _>>()?;
        let recomputed = statistics_from_rows(&report.rows)?;
        if recomputed.keys().ne(report.statistics.keys()) {
            return Err(Error::Invariant("row kinds differ from the report's statistics".into()));
        }
        for (kind, stored) in &report.statistics {
            let fresh = &recomputed[kind];
            let (a, b) = (&stored.summary, &fresh.summary);
            let fields = [
                ("mean", a.mean, b.mean),
                ("variance", a.variance, b.variance),
                ("skewness", a.skewness, b.skewness),
                ("excess_kurtosis", a.excess_kurtosis, b.excess_kurtosis),
            ];
            if a.n != b.n {
                return Err(Error::Invariant(format!("{kind}: {} rows but summary n = {}", b.n, a.n)));
            }
            for (name, x, y) in fields {
                if !close(x, y) {
                    return Err(Error::Invariant(format!("{kind}: stored {name} {x} != recomputed {y}")));
                }
            }
        }
        Ok(report)
    }
}

fn close(x: f64, y: f64) -> bool {
    (x.is_nan() && y.is_nan()) || (x - y).abs() <= 1e-12 * x.abs().max(1.0)
}

fn statistics_from_rows(rows: &[Row]) -> Result<BTreeMap<String, StatisticReport>> {
    let mut by_kind: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for row in rows {
        by_kind.entry(row.kind.clone()).or_default().push(row.value);
    }
    by_kind
        .into_iter()
        .map(|(k, v)| StatisticReport::from_values(&v).map(|s| (k, s)))
        .collect()
}

/// Runs the experiment with the worker count from [`WORKERS_ENV`] and writes
/// its output files.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    run_experiment_with_workers(config, workers_from_env()?)
}

/// Runs the experiment on a pool of `workers` threads (the global pool when
/// `None`) and writes its output files into `config.output_dir`.
pub fn run_experiment_with_workers(config: &ExperimentConfig, workers: Option<usize>) -> Result<ExperimentReport> {
    config.validate()?;
    fs::create_dir_all(&config.output_dir)?;
    let report = match workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::param(format!("worker pool: {e}")))?
            .install(|| execute(config))?,
        None => execute(config)?,
    };
    report.write(&config.output_dir)?;
    Ok(report)
}

/// Runs the experiment without writing files.
pub fn execute(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let start = Instant::now();
    let mut report = ExperimentReport::new(config)?;
    let key = StreamKey::new(config.master_seed);
    match config.experiment {
        ExperimentKind::CltV2 | ExperimentKind::CltV3 => run_clt(config, key, start, &mut report)?,
        ExperimentKind::Intensities => run_intensities(config, key, start, &mut report)?,
        ExperimentKind::Typical => run_typical(config, key, start, &mut report)?,
        ExperimentKind::Variance => run_variance(config, key, &mut report)?,
        ExperimentKind::VerifyLemmas => run_lemmas(config, key, &mut report)?,
    }
    report.statistics = statistics_from_rows(&report.rows)?;
    if matches!(config.experiment, ExperimentKind::CltV2 | ExperimentKind::CltV3) {
        clt_checks(config, &mut report);
    }
    report.finish();
    report.elapsed_seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

fn check_wall(config: &ExperimentConfig, start: Instant) -> Result<()> {
    if let Some(cap) = config.caps.max_wall_seconds {
        let used = start.elapsed().as_secs_f64();
        if used > cap {
            return Err(Error::Resource {
                what: "wall seconds",
                requested: used,
                cap,
            });
        }
    }
    Ok(())
}

/// Runs `job` for every replicate index in parallel and returns the results
/// in index order.
fn replicates<T: Send, F>(config: &ExperimentConfig, start: Instant, job: F) -> Vec<Result<T>>
where
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    (0..config.replicates)
        .into_par_iter()
        .map(|k| {
            check_wall(config, start)?;
            let out = job(k);
            log::debug!("replicate {k} done");
            out
        })
        .collect()
}

struct CltReplicate {
    rows: Vec<Row>,
    dropped: usize,
    boundary_violations: usize,
    jitter: f64,
    pivoted: bool,
    condition: f64,
    form_discrepancy: f64,
    sites: usize,
}

fn clt_kinds(config: &ExperimentConfig) -> (bool, bool) {
    let joint = config.clt.joint;
    match config.experiment {
        ExperimentKind::CltV3 => (joint, true),
        _ => (true, joint),
    }
}

fn clt_replicate(config: &ExperimentConfig, key: StreamKey, k: usize) -> Result<CltReplicate> {
    let (want_v2, want_v3) = clt_kinds(config);
    let rkey = key.purpose("replicate").child(k as u64);
    let seed = rkey.digest();
    let window = config.window()?;
    let points = sample_poisson_capped(1.0, &window, &mut rkey.purpose("points").rng(), config.caps.max_expected_points)?;
    let tri = triangulate(&points)?;
    let boundary_violations = boundary_stability_check(&tri, &window).violations();
    let edges = anchored_edges(&tri, &window);
    let triples = if want_v3 { anchored_triples(&tri, &window) } else { Vec::new() };
    let used = support(&edges, &triples);
    let sites = points.subset(&used);
    let (edges, triples) = reindex(&used, &edges, &triples)?;
    let params = FieldParams::new(config.hurst, config.scale_sq)?;
    let alpha = params.alpha();
    let field = sample_field_capped(&sites, params, &mut rkey.purpose("field").rng(), config.caps.max_field_points)?;
    let diag = field.diagnostics();
    let mut out = CltReplicate {
        rows: Vec::new(),
        dropped: 0,
        boundary_violations,
        jitter: diag.jitter,
        pivoted: diag.pivoted,
        condition: diag.condition_estimate,
        form_discrepancy: 0.0,
        sites: sites.len(),
    };
    let cond = config.clt.conditional_moments;
    if want_v2 {
        let v2 = compute_v2(&field, &edges)?;
        out.rows.push(Row {
            replicate: k,
            seed,
            kind: "V2".into(),
            n_terms: v2.n_terms,
            value: v2.value,
            cond_second_moment: if cond {
                Some(conditional_second_moment_v2(&edges, alpha, sites.points())?)
            } else {
                None
            },
            dropped_triples: 0,
        });
    }
    if want_v3 {
        let v3 = compute_v3(&field, &triples)?;
        out.dropped = v3.dropped;
        out.form_discrepancy = v3.max_form_discrepancy;
        out.rows.push(Row {
            replicate: k,
            seed,
            kind: "V3".into(),
            n_terms: v3.statistic.n_terms,
            value: v3.statistic.value,
            cond_second_moment: if cond {
                Some(conditional_second_moment_v3(&triples, alpha, sites.points())?)
            } else {
                None
            },
            dropped_triples: v3.dropped,
        });
    }
    if config.clt.contraction {
        let norm = contraction_norm_v2(&edges, alpha, sites.points(), config.caps.max_contraction_edges)?;
        out.rows.push(Row {
            replicate: k,
            seed,
            kind: "contraction".into(),
            n_terms: edges.len(),
            value: norm,
            cond_second_moment: None,
            dropped_triples: 0,
        });
    }
    Ok(out)
}

fn run_clt(config: &ExperimentConfig, key: StreamKey, start: Instant, report: &mut ExperimentReport) -> Result<()> {
    let results = replicates(config, start, |k| clt_replicate(config, key, k));
    let diag = &mut report.diagnostics;
    let mut ok = 0usize;
    let mut sites = 0usize;
    for (k, res) in results.into_iter().enumerate() {
        match res {
            Ok(r) => {
                ok += 1;
                sites += r.sites;
                diag.dropped_triples += r.dropped;
                diag.boundary_violations += r.boundary_violations;
                diag.replicates_with_boundary_violations += usize::from(r.boundary_violations > 0);
                *diag.jitter_levels.entry(format!("{:e}", r.jitter)).or_default() += 1;
                diag.pivoted_factorizations += usize::from(r.pivoted);
                diag.max_condition_estimate = diag.max_condition_estimate.max(r.condition);
                diag.max_v3_form_discrepancy = diag.max_v3_form_discrepancy.max(r.form_discrepancy);
                report.rows.extend(r.rows);
            }
            Err(e) => report.errors.push(ReplicateError {
                replicate: k,
                message: e.to_string(),
            }),
        }
    }
    if ok > 0 {
        diag.mean_field_sites = sites as f64 / ok as f64;
    }
    Ok(())
}

fn clt_checks(config: &ExperimentConfig, report: &mut ExperimentReport) {
    let (want_v2, want_v3) = clt_kinds(config);
    let kinds = [("V2", want_v2), ("V3", want_v3)];
    for (kind, wanted) in kinds {
        if !wanted {
            continue;
        }
        let Some(stat) = report.statistics.get(kind) else {
            report.checks.push(Check::new(
                &format!("{kind}_computed"),
                CheckOutcome::Fail,
                "no successful replicate".into(),
            ));
            continue;
        };
        let se = stat.std_error();
        let mean = stat.summary.mean;
        report.checks.push(if se.is_finite() {
            Check::of(
                &format!("{kind}_mean_within_3se"),
                mean.abs() <= 3.0 * se,
                format!("mean {mean:.5} vs 3 SE {:.5}", 3.0 * se),
            )
        } else {
            Check::new(
                &format!("{kind}_mean_within_3se"),
                CheckOutcome::Inconclusive,
                format!("insufficient n = {}", stat.summary.n),
            )
        });
        let normality = match &stat.tests {
            Some(t) if t.accepts() => Check::of(&format!("{kind}_normality"), true, tests_detail(t)),
            Some(t) if t.rejects() => Check::of(&format!("{kind}_normality"), false, tests_detail(t)),
            Some(t) => Check::new(&format!("{kind}_normality"), CheckOutcome::Inconclusive, tests_detail(t)),
            None => Check::new(
                &format!("{kind}_normality"),
                CheckOutcome::Inconclusive,
                stat.note.clone().unwrap_or_default(),
            ),
        };
        report.checks.push(normality);
    }
}

fn tests_detail(t: &NormalityReport) -> String {
    let show = |o: &crate::normality::TestOutcome| match o.p_value() {
        Some(p) => format!("p = {p:.4}"),
        None => "insufficient n".to_string(),
    };
    format!("Jarque-Bera {}, Lilliefors {}", show(&t.jarque_bera), show(&t.lilliefors))
}

fn run_intensities(
    config: &ExperimentConfig,
    key: StreamKey,
    start: Instant,
    report: &mut ExperimentReport,
) -> Result<()> {
    let window = config.window()?;
    let area = window.analysis_area();
    let results = replicates(config, start, |k| {
        let rkey = key.purpose("replicate").child(k as u64);
        let points = sample_poisson_capped(1.0, &window, &mut rkey.purpose("points").rng(), config.caps.max_expected_points)?;
        let tri = triangulate(&points)?;
        let violations = boundary_stability_check(&tri, &window).violations();
        Ok((rkey.digest(), estimate_intensities(&tri, &window), violations))
    });
    for (k, res) in results.into_iter().enumerate() {
        match res {
            Ok((seed, est, violations)) => {
                report.diagnostics.boundary_violations += violations;
                report.diagnostics.replicates_with_boundary_violations += usize::from(violations > 0);
                for (kind, value) in [("beta1", est.beta1), ("beta2", est.beta2)] {
                    report.rows.push(Row {
                        replicate: k,
                        seed,
                        kind: kind.into(),
                        n_terms: (value * area).round() as usize,
                        value,
                        cond_second_moment: None,
                        dropped_triples: 0,
                    });
                }
            }
            Err(e) => report.errors.push(ReplicateError {
                replicate: k,
                message: e.to_string(),
            }),
        }
    }
    for (kind, lo, hi) in [("beta1", 2.9, 3.1), ("beta2", 1.9, 2.1)] {
        let values = report.values(kind);
        if values.is_empty() {
            continue;
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        report.diagnostics.values.insert(format!("{kind}_mean"), mean);
        report.checks.push(Check::of(
            &format!("{kind}_in_range"),
            (lo..=hi).contains(&mean),
            format!("mean {mean:.4}, accepted range [{lo}, {hi}]"),
        ));
    }
    Ok(())
}

/// Edge count needed before the pooled edge-length comparison is decisive.
pub const TYPICAL_MIN_EDGES: usize = 100_000;
/// Largest accepted Kolmogorov distance of pooled edge lengths.
pub const TYPICAL_MAX_KS: f64 = 0.02;

fn run_typical(config: &ExperimentConfig, key: StreamKey, start: Instant, report: &mut ExperimentReport) -> Result<()> {
    let window = config.window()?;
    let quad = config.typical.quadrature_size;
    let results = replicates(config, start, |k| {
        let rkey = key.purpose("replicate").child(k as u64);
        let points = sample_poisson_capped(1.0, &window, &mut rkey.purpose("points").rng(), config.caps.max_expected_points)?;
        let tri = triangulate(&points)?;
        let lengths: Vec<f64> = anchored_edges(&tri, &window).iter().map(|e| e.length).collect();
        Ok((rkey.digest(), lengths))
    });
    let mut pooled = Vec::new();
    for (k, res) in results.into_iter().enumerate() {
        match res {
            Ok((seed, lengths)) => {
                if lengths.is_empty() {
                    report.errors.push(ReplicateError {
                        replicate: k,
                        message: "no anchored edges".into(),
                    });
                    continue;
                }
                report.rows.push(Row {
                    replicate: k,
                    seed,
                    kind: "edge_length_mean".into(),
                    n_terms: lengths.len(),
                    value: lengths.iter().sum::<f64>() / lengths.len() as f64,
                    cond_second_moment: None,
                    dropped_triples: 0,
                });
                pooled.extend(lengths);
            }
            Err(e) => report.errors.push(ReplicateError {
                replicate: k,
                message: e.to_string(),
            }),
        }
    }
    let values = &mut report.diagnostics.values;
    if !pooled.is_empty() {
        pooled.sort_by(f64::total_cmp);
        let ks = ks_distance_sorted(&pooled, |l| typical_edge_cdf(l, quad));
        values.insert("edges_pooled".into(), pooled.len() as f64);
        values.insert("ks_edge_length".into(), ks);
        let detail = format!("KS {ks:.5} over {} edges, threshold {TYPICAL_MAX_KS}", pooled.len());
        report.checks.push(if pooled.len() >= TYPICAL_MIN_EDGES {
            Check::of("edge_length_ks", ks < TYPICAL_MAX_KS, detail)
        } else {
            Check::new("edge_length_ks", CheckOutcome::Inconclusive, format!("{detail}; needs {TYPICAL_MIN_EDGES} edges"))
        });
    }
    let draws = config.typical.cell_draws;
    if draws > 0 {
        let cell_key = key.purpose("typical_cells");
        let cells: Vec<TypicalCellDraw> = (0..draws)
            .into_par_iter()
            .map(|k| sample_typical_cell(&mut cell_key.child(k as u64).rng()))
            .collect();
        let mut edge: Vec<f64> = cells.iter().map(|c| couple_from_cell(c).d2).collect();
        edge.sort_by(f64::total_cmp);
        let ks = ks_distance_sorted(&edge, |l| typical_edge_cdf(l, quad));
        // Asymptotic 1 % critical value of the one-sample statistic.
        let critical = 1.628 / (draws as f64).sqrt();
        values.insert("ks_typical_cell_edge".into(), ks);
        report.checks.push(Check::of(
            "typical_cell_edge_ks",
            ks < critical,
            format!("KS {ks:.5} over {draws} Palm draws, 1% critical {critical:.5}"),
        ));
        report.cell_draws = cells;
    }
    Ok(())
}

fn run_variance(config: &ExperimentConfig, key: StreamKey, report: &mut ExperimentReport) -> Result<()> {
    let settings = &config.variance;
    let vkey = key.purpose("variance");
    let (breakdown, draws) = estimate_sigma_v2(config.alpha(), config.replicates, settings.inner, settings.proposal, vkey)?;
    let seed = vkey.digest();
    let mut push = |replicate: usize, kind: &str, value: f64| {
        report.rows.push(Row {
            replicate,
            seed,
            kind: kind.into(),
            n_terms: breakdown.outer,
            value,
            cond_second_moment: None,
            dropped_triples: 0,
        })
    };
    push(0, "sigma0", breakdown.sigma0.value);
    for (k, s) in breakdown.sigma1.iter().enumerate() {
        push(k + 1, s.variant.as_str(), s.estimate.value);
    }
    push(breakdown.sigma1.len() + 1, "sigma_v2", breakdown.total);
    let values = &mut report.diagnostics.values;
    values.insert("sigma_v2".into(), breakdown.total);
    values.insert("sigma_v2_std_error".into(), breakdown.total_std_error);
    values.insert("truncation_tail".into(), breakdown.truncation_tail);
    report.checks.push(Check::of(
        "sigma_v2_finite",
        breakdown.total.is_finite() && breakdown.total_std_error.is_finite(),
        format!("{:.5} ± {:.5}", breakdown.total, breakdown.total_std_error),
    ));
    report.variance = Some(breakdown);
    report.outer_draws = draws;
    Ok(())
}

fn run_lemmas(config: &ExperimentConfig, key: StreamKey, report: &mut ExperimentReport) -> Result<()> {
    let s = &config.lemmas;
    let alpha = config.alpha();
    let angles: Vec<f64> = (0..2 * s.angle_steps)
        .map(|k| k as f64 * std::f64::consts::PI / s.angle_steps as f64)
        .collect();
    let [l1, l2] = s.increment_lengths;
    let mut reports = vec![(
        "lemma_5_1_i".to_string(),
        key.purpose("lemma_5_1_i").digest(),
        check_corr_asymptotics(alpha, l1, l2, &angles, &s.distances)?,
    )];
    let env_key = key.purpose("lemma_5_1_ii");
    reports.push((
        "lemma_5_1_ii".into(),
        env_key.digest(),
        check_corr_envelope(alpha, s.envelope_epsilon, s.envelope_samples, &mut env_key.rng())?,
    ));
    let sweep_key = key.purpose("lemma_5_2");
    let sweep = neighbor_sweep(s.sweep_size, s.sweep_radii[0], s.sweep_radii[1], &mut sweep_key.purpose("configs").rng())?;
    reports.push((
        "lemma_5_2".into(),
        sweep_key.digest(),
        check_p2n_bounds(&sweep, s.sweep_inner, &mut sweep_key.purpose("inner").rng())?,
    ));
    for &a in &s.moment_alphas {
        reports.push((
            format!("lemma_5_3_alpha_{a}"),
            0,
            check_exp_moment_bound(a, s.moment_d0, &s.moment_n)?,
        ));
    }
    for (k, (stem, seed, lemma)) in reports.into_iter().enumerate() {
        let failing = lemma.cases.iter().filter(|c| !c.holds()).count();
        report.rows.push(Row {
            replicate: k,
            seed,
            kind: lemma.lemma_id.clone(),
            n_terms: lemma.cases.len(),
            value: failing as f64,
            cond_second_moment: None,
            dropped_triples: lemma.skipped,
        });
        report.checks.push(Check::of(
            &stem,
            lemma.pass,
            format!("{failing} of {} cases fail", lemma.cases.len()),
        ));
        report.lemmas.push(LemmaOverview {
            file: format!("{stem}.json"),
            lemma_id: lemma.lemma_id.clone(),
            pass: lemma.pass,
            cases: lemma.cases.len(),
            failing_cases: failing,
            summary: lemma.summary.clone(),
        });
        report.lemma_reports.push((stem, lemma));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kind: ExperimentKind, dir: &Path) -> ExperimentConfig {
        let mut c = ExperimentConfig::new(kind);
        c.anchor_side = 8.0;
        c.margin = Some(4.0);
        c.replicates = 12;
        c.master_seed = 5;
        c.output_dir = dir.to_path_buf();
        c
    }

    #[test]
    fn overrides_and_unknown_keys() {
        let text = r#"{"experiment": "clt-v2", "replicates": 5}"#;
        let sets = vec![
            ("hurst".to_string(), "0.3".to_string()),
            ("caps.max_field_points".to_string(), "500".to_string()),
            ("output_dir".to_string(), "results/a".to_string()),
        ];
        let c = ExperimentConfig::from_json_with_overrides(text, &sets).unwrap();
        assert_eq!(c.hurst, 0.3);
        assert_eq!(c.caps.max_field_points, 500);
        assert_eq!(c.output_dir, PathBuf::from("results/a"));
        assert_eq!(c.replicates, 5);
        assert!(matches!(
            ExperimentConfig::from_json(r#"{"experiment": "clt-v2", "hurts": 0.3}"#),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            ExperimentConfig::from_json_with_overrides(text, &[("caps.bogus".into(), "1".into())]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn validation_lists_every_bad_field() {
        let text = r#"{"experiment": "clt-v2", "hurst": 1.5, "replicates": 0, "anchor_side": -1}"#;
        let Err(Error::Config(bad)) = ExperimentConfig::from_json(text) else {
            panic!("expected a config error");
        };
        assert_eq!(bad.len(), 3, "{bad:?}");
    }

    #[test]
    fn default_margin_grows_slowly() {
        let mut c = ExperimentConfig::new(ExperimentKind::CltV2);
        c.anchor_side = 20.0;
        assert_eq!(c.effective_margin(), 10.0);
        c.anchor_side = 1e4;
        assert!((c.effective_margin() - 4.0 * (1e8f64).ln().sqrt()).abs() < 1e-12);
    }

    #[test]
    fn single_replicate_is_insufficient() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = small(ExperimentKind::CltV2, dir.path());
        c.replicates = 1;
        let r = run_experiment_with_workers(&c, Some(1)).unwrap();
        assert_eq!(r.rows.len(), 1);
        let t = r.statistic("V2").unwrap().tests.unwrap();
        assert!(t.jarque_bera.rejects().is_none() && t.lilliefors.rejects().is_none());
        assert_eq!(r.status, RunStatus::Inconclusive);
        assert_eq!(r.status.exit_code(), 2);
    }

    #[test]
    fn clt_rows_reload_and_match_across_worker_counts() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let mut ca = small(ExperimentKind::CltV3, a.path());
        ca.clt.joint = true;
        ca.clt.contraction = true;
        let mut cb = ca.clone();
        cb.output_dir = b.path().to_path_buf();
        let ra = run_experiment_with_workers(&ca, Some(1)).unwrap();
        run_experiment_with_workers(&cb, Some(3)).unwrap();
        let rows_a = fs::read(a.path().join(ROWS_FILE)).unwrap();
        assert_eq!(rows_a, fs::read(b.path().join(ROWS_FILE)).unwrap());
        assert_eq!(ra.rows.len(), 36);
        let loaded = ExperimentReport::load(a.path()).unwrap();
        assert_eq!(loaded.rows, ra.rows);
        assert_eq!(loaded.statistics, ra.statistics);
        assert!(ra.rows.iter().filter(|r| r.kind != "contraction").all(|r| r.cond_second_moment.is_some()));
    }

    #[test]
    fn tampered_summary_fails_to_load() {
        let dir = tempfile::tempdir().unwrap();
        let c = small(ExperimentKind::Intensities, dir.path());
        run_experiment_with_workers(&c, None).unwrap();
        let path = dir.path().join(REPORT_FILE);
        let mut doc: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        let mean = doc["statistics"]["beta1"]["summary"]["mean"].as_f64().unwrap();
        doc["statistics"]["beta1"]["summary"]["mean"] = Value::from(mean + 1e-6);
        fs::write(&path, doc.to_string()).unwrap();
        assert!(matches!(ExperimentReport::load(dir.path()), Err(Error::Invariant(_))));
    }

    #[test]
    fn caps_yield_partial_report() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = small(ExperimentKind::CltV2, dir.path());
        c.caps.max_field_points = 10;
        let r = run_experiment_with_workers(&c, Some(1)).unwrap();
        assert_eq!(r.status, RunStatus::Error);
        assert_eq!(r.errors.len(), 12);
        assert!(r.errors[0].message.contains("resource cap"));
        assert!(dir.path().join(REPORT_FILE).exists());
    }

    #[test]
    fn lemma_run_writes_reports() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = small(ExperimentKind::VerifyLemmas, dir.path());
        c.lemmas.envelope_samples = 2000;
        c.lemmas.sweep_size = 5;
        c.lemmas.sweep_inner = 200;
        let r = run_experiment_with_workers(&c, None).unwrap();
        assert_eq!(r.lemmas.len(), 6);
        for l in &r.lemmas {
            assert!(dir.path().join(&l.file).exists(), "{}", l.file);
        }
        ExperimentReport::load(dir.path()).unwrap();
    }
}
