//! Named, seeded experiments that emit metrics reports.
//!
//! An experiment is a pure function of its resolved configuration: the same
//! name, seed and parameters give byte-identical reports. Repetitions fan out
//! over [`crate::par::map_indexed`] with one rng stream per repetition index.

mod exact;
mod sampling;
mod training;

use crate::controllers::ControllerError;
use crate::denoiser::DenoiserError;
use crate::oracle::OracleError;
use crate::rng::SeededRng;
use crate::state::StateError;
use crate::targets::TargetError;
use crate::ARTIFACT_VERSION;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub use exact::{AlignmentParams, DoobParams, MechanicsParams, SoftBonRateParams};
pub use sampling::{BernsteinParams, SeparationParams, TopMParams, VarianceParams};
pub use training::{MinimizerParams, OrderParams, TrackingParams};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("unknown experiment `{name}`; registered: {}", EXPERIMENTS.join(", "))]
    Unknown { name: String },
    #[error("invalid parameters for `{name}`: {message}")]
    Params { name: String, message: String },
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
    #[error(transparent)]
    Target(#[from] TargetError),
    #[error(transparent)]
    State(#[from] StateError),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Registered experiment names.
pub const EXPERIMENTS: &[&str] = &[
    "alignment",
    "doob",
    "softbon-rate",
    "bernstein-coverage",
    "topm-regret",
    "separation",
    "variance-optimal",
    "mechanics",
    "minimizer-preservation",
    "online-tracking",
    "order-comparison",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    /// Experiment-specific parameters; missing fields take their defaults.
    #[serde(default)]
    pub params: serde_json::Value,
}

impl ExperimentConfig {
    pub fn new(name: &str, seed: u64) -> Self {
        Self {
            name: name.to_string(),
            seed,
            params: serde_json::Value::Null,
        }
    }

    pub fn with_params<P: Serialize>(name: &str, seed: u64, params: &P) -> Self {
        Self {
            name: name.to_string(),
            seed,
            params: serde_json::to_value(params).expect("parameter structs serialize"),
        }
    }
}

/// Hex SHA-256 of the compact JSON of `value`.
///
/// `serde_json` maps keep keys sorted, so the encoding is canonical.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("configs serialize");
    hex::encode(Sha256::digest(json.as_bytes()))
}

/// One machine-checkable comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub bound: f64,
    pub passed: bool,
    /// Hard checks decide the report's pass flag; soft ones are observations.
    pub hard: bool,
}

impl Check {
    /// `measured <= bound`.
    pub fn at_most(name: impl Into<String>, measured: f64, bound: f64) -> Self {
        Self {
            name: name.into(),
            measured,
            bound,
            passed: measured <= bound,
            hard: true,
        }
    }

    /// `measured >= bound`.
    pub fn at_least(name: impl Into<String>, measured: f64, bound: f64) -> Self {
        Self {
            name: name.into(),
            measured,
            bound,
            passed: measured >= bound,
            hard: true,
        }
    }

    /// `lo <= measured <= hi`, recorded with `bound = hi`.
    pub fn within(name: impl Into<String>, measured: f64, lo: f64, hi: f64) -> Self {
        Self {
            name: name.into(),
            measured,
            bound: hi,
            passed: measured >= lo && measured <= hi,
            hard: true,
        }
    }

    pub fn flag(name: impl Into<String>, ok: bool) -> Self {
        Self {
            name: name.into(),
            measured: if ok { 1.0 } else { 0.0 },
            bound: 1.0,
            passed: ok,
            hard: true,
        }
    }

    pub fn soft(mut self) -> Self {
        self.hard = false;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub experiment: String,
    pub repetition: usize,
    pub config_hash: String,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub experiment: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub passed: bool,
    pub checks: Vec<Check>,
    pub records: Vec<MetricsRecord>,
}

impl Report {
    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn failed_checks(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| c.hard && !c.passed).collect()
    }
}

/// Rows and checks produced by one experiment body.
#[derive(Debug, Default)]
pub(crate) struct Outcome {
    pub rows: Vec<BTreeMap<String, f64>>,
    pub checks: Vec<Check>,
}

impl Outcome {
    pub fn row(&mut self, pairs: &[(&str, f64)]) {
        self.rows
            .push(pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect());
    }
}

pub(crate) fn parse_params<P: DeserializeOwned + Default>(name: &str, value: &serde_json::Value) -> Result<P, ExperimentError> {
    if value.is_null() {
        return Ok(P::default());
    }
    serde_json::from_value(value.clone()).map_err(|e| ExperimentError::Params {
        name: name.to_string(),
        message: e.to_string(),
    })
}

pub(crate) fn bad_params(name: &str, message: impl Into<String>) -> ExperimentError {
    ExperimentError::Params {
        name: name.to_string(),
        message: message.into(),
    }
}

/// Independent generator for repetition `rep` of a run seeded with `seed`.
pub(crate) fn rep_rng(seed: u64, rep: usize) -> SeededRng {
    SeededRng::new(seed, 0).fork(rep as u64)
}

fn resolve_and_run<P>(
    config: &ExperimentConfig,
    body: fn(&P, u64) -> Result<Outcome, ExperimentError>,
) -> Result<Report, ExperimentError>
where
    P: DeserializeOwned + Default + Serialize,
{
    let params: P = parse_params(&config.name, &config.params)?;
    let resolved = ExperimentConfig::with_params(&config.name, config.seed, &params);
    let hash = config_hash(&resolved);
    let outcome = body(&params, config.seed)?;
    let records = outcome
        .rows
        .into_iter()
        .enumerate()
        .map(|(i, metrics)| MetricsRecord {
            experiment: config.name.clone(),
            repetition: i,
            config_hash: hash.clone(),
            seed: config.seed,
            metrics,
        })
        .collect();
    Ok(Report {
        experiment: config.name.clone(),
        version: ARTIFACT_VERSION.to_string(),
        config_hash: hash,
        seed: config.seed,
        config: resolved,
        passed: outcome.checks.iter().all(|c| c.passed || !c.hard),
        checks: outcome.checks,
        records,
    })
}

/// Run the experiment named in `config`.
pub fn run(config: &ExperimentConfig) -> Result<Report, ExperimentError> {
    match config.name.as_str() {
        "alignment" => resolve_and_run(config, exact::alignment),
        "doob" => resolve_and_run(config, exact::doob),
        "softbon-rate" => resolve_and_run(config, exact::softbon_rate),
        "mechanics" => resolve_and_run(config, exact::mechanics),
        "bernstein-coverage" => resolve_and_run(config, sampling::bernstein_coverage),
        "topm-regret" => resolve_and_run(config, sampling::topm_regret),
        "separation" => resolve_and_run(config, sampling::separation),
        "variance-optimal" => resolve_and_run(config, sampling::variance_optimal),
        "minimizer-preservation" => resolve_and_run(config, training::minimizer_preservation),
        "online-tracking" => resolve_and_run(config, training::online_tracking),
        "order-comparison" => resolve_and_run(config, training::order_comparison),
        other => Err(ExperimentError::Unknown { name: other.to_string() }),
    }
}

/// Write `<dir>/<experiment>.json` and `<dir>/<experiment>.csv`.
pub fn write_report(report: &Report, dir: &Path) -> Result<(PathBuf, PathBuf), ExperimentError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| ExperimentError::Io { path, source }
    };
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let json_path = dir.join(format!("{}.json", report.experiment));
    let csv_path = dir.join(format!("{}.csv", report.experiment));
    let json = serde_json::to_string_pretty(report).expect("reports serialize");
    std::fs::write(&json_path, json + "\n").map_err(io(&json_path))?;
    std::fs::write(&csv_path, records_csv(report)?).map_err(io(&csv_path))?;
    Ok((json_path, csv_path))
}

/// Flat CSV with one row per record and one column per metric name.
pub fn records_csv(report: &Report) -> Result<Vec<u8>, ExperimentError> {
    let keys: BTreeSet<&String> = report.records.iter().flat_map(|r| r.metrics.keys()).collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["experiment", "repetition", "config_hash", "seed", "version"];
    header.extend(keys.iter().map(|k| k.as_str()));
    w.write_record(&header)?;
    for r in &report.records {
        let mut row = vec![
            r.experiment.clone(),
            r.repetition.to_string(),
            r.config_hash.clone(),
            r.seed.to_string(),
            report.version.clone(),
        ];
        row.extend(keys.iter().map(|k| r.metrics.get(*k).map(|v| v.to_string()).unwrap_or_default()));
        w.write_record(&row)?;
    }
    w.into_inner().map_err(|e| csv::Error::from(e.into_error()).into())
}

/// Least-squares slope of `y` on `x`.
pub fn ols_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_name_lists_registry() {
        let err = run(&ExperimentConfig::new("nope", 0)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("alignment") && msg.contains("order-comparison"));
    }

    #[test]
    fn hash_ignores_key_order_and_sees_defaults() {
        let a: ExperimentConfig =
            serde_json::from_str(r#"{"name":"x","seed":1,"params":{"a":1,"b":2}}"#).unwrap();
        let b: ExperimentConfig =
            serde_json::from_str(r#"{"params":{"b":2,"a":1},"seed":1,"name":"x"}"#).unwrap();
        assert_eq!(config_hash(&a), config_hash(&b));
        assert_ne!(config_hash(&a), config_hash(&ExperimentConfig::new("x", 1)));
    }

    #[test]
    fn bad_params_are_reported() {
        let cfg = ExperimentConfig {
            name: "alignment".into(),
            seed: 0,
            params: serde_json::json!({"instances": "many"}),
        };
        assert!(matches!(run(&cfg), Err(ExperimentError::Params { .. })));
    }

    #[test]
    fn slope_of_a_line() {
        assert!((ols_slope(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn csv_has_union_of_columns() {
        let report = Report {
            experiment: "e".into(),
            version: "v".into(),
            config_hash: "h".into(),
            seed: 3,
            config: ExperimentConfig::new("e", 3),
            passed: true,
            checks: vec![],
            records: vec![
                MetricsRecord {
                    experiment: "e".into(),
                    repetition: 0,
                    config_hash: "h".into(),
                    seed: 3,
                    metrics: BTreeMap::from([("a".to_string(), 1.5)]),
                },
                MetricsRecord {
                    experiment: "e".into(),
                    repetition: 1,
                    config_hash: "h".into(),
                    seed: 3,
                    metrics: BTreeMap::from([("b".to_string(), 2.0)]),
                },
            ],
        };
        let text = String::from_utf8(records_csv(&report).unwrap()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "experiment,repetition,config_hash,seed,version,a,b");
        assert_eq!(lines[1], "e,0,h,3,v,1.5,");
        assert_eq!(lines[2], "e,1,h,3,v,,2");
    }
}
