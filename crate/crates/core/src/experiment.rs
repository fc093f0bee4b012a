//! Config-driven experiment runner.
//!
//! A run reads one TOML document, builds the data pipeline, executes one
//! driver and writes a run directory holding `config_echo.toml`,
//! `records.jsonl` (one [`RoundRecord`] per line, written as produced) and
//! `summary.json`. A sweep repeats a FedSA run over a grid of initial
//! temperatures, cooling constants and seeds.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::centralized::run_centralized_with;
use crate::data::{self, CsvSchema, Dataset, LoadReport, Shard, SynthSpec};
use crate::error::{Error, Result};
use crate::federation::{run_fedavg_with, FedAvgConfig, Federation, FederationConfig};
use crate::fedsa::{run_fedsa_with, Cooling, FedSaConfig, SearchSpace, Solution};
use crate::metrics::{rounds_to_accuracy, RoundRecord, SolutionSnapshot};
use crate::nn::{init_params, Activation, NetworkSpec};
use crate::scalar::Scalar;
use crate::seed::{derive_seed, STREAM_BALANCE, STREAM_INIT, STREAM_SHARD, STREAM_SPLIT, STREAM_SYNTH};

pub const RECORDS_FILE: &str = "records.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_ECHO_FILE: &str = "config_echo.toml";
pub const SWEEP_SUMMARY_FILE: &str = "sweep_summary.json";

/// Columns removed from flow CSVs unless configured otherwise: endpoint
/// addresses, ports and protocol, plus the non-numeric flow identifier and
/// timestamp.
pub const DEFAULT_DROP_COLUMNS: [&str; 11] = [
    "Flow ID",
    "Source IP",
    "Src IP",
    "Source Port",
    "Src Port",
    "Destination IP",
    "Dst IP",
    "Destination Port",
    "Dst Port",
    "Protocol",
    "Timestamp",
];

/// Default sweep grid: initial temperatures, cooling constants, seeds.
pub const DEFAULT_SWEEP_T_INIT: [f64; 3] = [0.1, 0.4, 1.0];
pub const DEFAULT_SWEEP_ALPHA: [f64; 3] = [0.05, 0.4, 0.9];
pub const DEFAULT_SWEEP_SEEDS: [u64; 3] = [1, 2, 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Driver {
    Fedsa,
    Fedavg,
    Centralized,
}

impl fmt::Display for Driver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Driver::Fedsa => "fedsa",
            Driver::Fedavg => "fedavg",
            Driver::Centralized => "centralized",
        })
    }
}

impl FromStr for Driver {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fedsa" => Ok(Driver::Fedsa),
            "fedavg" => Ok(Driver::Fedavg),
            "centralized" => Ok(Driver::Centralized),
            other => Err(Error::config("driver", format!("unknown driver `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    Random,
    Balanced,
}

// ---------------------------------------------------------------------------
// Config document

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    driver: Option<Driver>,
    seed: Option<u64>,
    data_seed: Option<u64>,
    train_fraction: Option<f64>,
    balanced_split: Option<bool>,
    output: Option<PathBuf>,
    target_accuracy: Option<f64>,
    precision: Option<Precision>,
    dump_normalized: Option<bool>,
    data: Option<RawData>,
    federation: Option<RawFederation>,
    model: Option<RawModel>,
    fedavg: Option<RawFedAvg>,
    fedsa: Option<RawFedSa>,
    sweep: Option<RawSweep>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawData {
    synthetic: Option<RawSynthetic>,
    csv: Option<RawCsv>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSynthetic {
    n_samples: Option<usize>,
    n_features: Option<usize>,
    class_ratio: Option<f64>,
    separation: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCsv {
    paths: Option<Vec<PathBuf>>,
    label_column: Option<String>,
    drop_columns: Option<Vec<String>>,
    benign_labels: Option<Vec<String>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFederation {
    n_participants: Option<usize>,
    subset_size: Option<usize>,
    batch_size: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    hidden: Option<Vec<usize>>,
    activation: Option<Activation>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFedAvg {
    tau: Option<usize>,
    eta0: Option<f64>,
    rounds: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFedSa {
    eta_min: Option<f64>,
    eta_max: Option<f64>,
    tau_min: Option<usize>,
    tau_max: Option<usize>,
    t_init: Option<f64>,
    alpha: Option<f64>,
    epsilon: Option<f64>,
    epochs: Option<usize>,
    cooling: Option<Cooling>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSweep {
    t_init: Option<Vec<f64>>,
    alpha: Option<Vec<f64>>,
    seeds: Option<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic {
        n_samples: usize,
        n_features: usize,
        class_ratio: f64,
        separation: f64,
    },
    Csv {
        paths: Vec<PathBuf>,
        schema: CsvSchema,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FedSaSettings {
    pub eta_min: f64,
    pub eta_max: f64,
    pub tau_min: usize,
    pub tau_max: usize,
    pub t_init: f64,
    pub alpha: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub cooling: Cooling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub t_init: Vec<f64>,
    pub alpha: Vec<f64>,
    pub seeds: Vec<u64>,
}

/// Fully resolved and validated experiment description.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub driver: Driver,
    /// Seeds model initialization, participant selection, local training
    /// and annealing.
    pub seed: u64,
    /// Seeds data generation, splitting and sharding.
    pub data_seed: u64,
    pub data: DataSource,
    pub n_participants: usize,
    pub subset_size: usize,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub fedavg: Option<FedAvgConfig>,
    pub fedsa: Option<FedSaSettings>,
    pub sweep: Option<SweepGrid>,
    pub train_fraction: f64,
    pub balanced_split: bool,
    pub output: PathBuf,
    pub target_accuracy: f64,
    pub precision: Precision,
    pub dump_normalized: bool,
}

/// Config plus the list of defaults that were filled in, as `key = value`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedConfig {
    pub config: ExperimentConfig,
    pub defaults_applied: Vec<String>,
}

/// Command-line overrides applied before validation.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub driver: Option<Driver>,
    pub output: Option<PathBuf>,
}

struct Resolver {
    applied: Vec<String>,
}

impl Resolver {
    fn or_default<V: Serialize>(&mut self, value: Option<V>, key: &str, default: V) -> V {
        match value {
            Some(v) => v,
            None => {
                let shown = toml::Value::try_from(&default).map_or_else(|e| e.to_string(), |v| v.to_string());
                self.applied.push(format!("{key} = {shown}"));
                default
            }
        }
    }
}

fn required<V>(value: Option<V>, key: &str) -> Result<V> {
    value.ok_or_else(|| Error::config(key, "missing required key"))
}

fn ensure(ok: bool, key: &str, message: impl Into<String>) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::config(key, message))
    }
}

fn check_alpha(alpha: f64, key: &str) -> Result<()> {
    ensure(
        alpha > 0.0 && alpha < 1.0,
        key,
        format!("cooling constant must satisfy 0 < alpha < 1, got {alpha}"),
    )
}

fn check_t_init(t: f64, key: &str) -> Result<()> {
    ensure(t > 0.0 && t.is_finite(), key, format!("initial temperature must be positive, got {t}"))
}

/// Parses and validates a TOML config document.
///
/// Relative CSV paths are resolved against `base_dir`.
pub fn parse_config(text: &str, base_dir: Option<&Path>, overrides: &Overrides) -> Result<ParsedConfig> {
    let deserializer = toml::Deserializer::parse(text).map_err(|e| Error::config("<document>", e.to_string()))?;
    let mut raw: RawConfig = serde_path_to_error::deserialize(deserializer).map_err(|e| {
        let key = e.path().to_string();
        Error::config(key, e.into_inner().message().to_owned())
    })?;
    if let Some(seed) = overrides.seed {
        raw.seed = Some(seed);
    }
    if let Some(driver) = overrides.driver {
        raw.driver = Some(driver);
    }
    if let Some(output) = &overrides.output {
        raw.output = Some(output.clone());
    }
    resolve(raw, base_dir)
}

pub fn load_config(path: &Path, overrides: &Overrides) -> Result<ParsedConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::config("<file>", format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text, path.parent(), overrides)
}

fn resolve(raw: RawConfig, base_dir: Option<&Path>) -> Result<ParsedConfig> {
    let mut r = Resolver { applied: Vec::new() };
    let driver = required(raw.driver, "driver")?;
    let seed = required(raw.seed, "seed")?;
    let data_seed = raw.data_seed.unwrap_or(seed);

    let data = raw.data.ok_or_else(|| Error::config("data", "missing required section"))?;
    let data = match (data.synthetic, data.csv) {
        (Some(s), None) => {
            let n_samples = r.or_default(s.n_samples, "data.synthetic.n_samples", 4000);
            let n_features = r.or_default(s.n_features, "data.synthetic.n_features", 10);
            let class_ratio = r.or_default(s.class_ratio, "data.synthetic.class_ratio", 0.5);
            let separation = r.or_default(s.separation, "data.synthetic.separation", 8.0);
            ensure(n_samples >= 2, "data.synthetic.n_samples", "need at least 2 samples")?;
            ensure(n_features >= 1, "data.synthetic.n_features", "need at least 1 feature")?;
            ensure(
                class_ratio > 0.0 && class_ratio < 1.0,
                "data.synthetic.class_ratio",
                format!("must lie in (0, 1), got {class_ratio}"),
            )?;
            ensure(
                separation > 0.0 && separation.is_finite(),
                "data.synthetic.separation",
                format!("must be positive, got {separation}"),
            )?;
            DataSource::Synthetic {
                n_samples,
                n_features,
                class_ratio,
                separation,
            }
        }
        (None, Some(c)) => {
            let paths = required(c.paths, "data.csv.paths")?;
            ensure(!paths.is_empty(), "data.csv.paths", "at least one CSV file is required")?;
            let paths = paths
                .into_iter()
                .map(|p| match base_dir {
                    Some(base) if p.is_relative() => base.join(p),
                    _ => p,
                })
                .collect();
            let label_column = r.or_default(c.label_column, "data.csv.label_column", "Label".to_owned());
            let drop_columns = r.or_default(
                c.drop_columns,
                "data.csv.drop_columns",
                DEFAULT_DROP_COLUMNS.iter().map(|s| (*s).to_owned()).collect(),
            );
            let benign_labels = r.or_default(c.benign_labels, "data.csv.benign_labels", vec!["BENIGN".to_owned()]);
            DataSource::Csv {
                paths,
                schema: CsvSchema {
                    label_column,
                    drop_columns,
                    benign_labels,
                },
            }
        }
        (Some(_), Some(_)) => return Err(Error::config("data", "give exactly one of data.synthetic and data.csv")),
        (None, None) => return Err(Error::config("data", "one of data.synthetic or data.csv is required")),
    };

    let fed = raw.federation.ok_or_else(|| Error::config("federation", "missing required section"))?;
    let n_participants = required(fed.n_participants, "federation.n_participants")?;
    let subset_size = required(fed.subset_size, "federation.subset_size")?;
    let batch_size = r.or_default(fed.batch_size, "federation.batch_size", 32);
    ensure(n_participants >= 1, "federation.n_participants", "need at least one participant")?;
    ensure(subset_size >= 1, "federation.subset_size", "need at least one participant per round")?;
    ensure(
        subset_size <= n_participants,
        "federation.subset_size",
        format!("subset_size ({subset_size}) exceeds n_participants ({n_participants})"),
    )?;
    ensure(batch_size >= 1, "federation.batch_size", "must be at least 1")?;

    let model = raw.model.unwrap_or_default();
    let hidden = r.or_default(model.hidden, "model.hidden", NetworkSpec::DEFAULT_HIDDEN.to_vec());
    ensure(hidden.iter().all(|&w| w > 0), "model.hidden", "layer widths must be positive")?;
    let activation = r.or_default(model.activation, "model.activation", Activation::Relu);

    let needs_fedavg = matches!(driver, Driver::Fedavg | Driver::Centralized);
    let fedavg = match raw.fedavg {
        Some(f) => {
            let rounds = required(f.rounds, "fedavg.rounds")?;
            let tau = r.or_default(f.tau, "fedavg.tau", 10);
            let eta0 = r.or_default(f.eta0, "fedavg.eta0", 0.1);
            ensure(tau >= 1, "fedavg.tau", "must be at least 1")?;
            ensure(
                eta0 >= 0.0 && eta0.is_finite(),
                "fedavg.eta0",
                format!("must be a finite non-negative number, got {eta0}"),
            )?;
            Some(FedAvgConfig { tau, eta0, rounds })
        }
        None if needs_fedavg => return Err(Error::config("fedavg", format!("section required by driver `{driver}`"))),
        None => None,
    };

    let fedsa = match raw.fedsa {
        Some(f) => {
            let epochs = required(f.epochs, "fedsa.epochs")?;
            let eta_min = r.or_default(f.eta_min, "fedsa.eta_min", SearchSpace::DEFAULT_ETA.0);
            let eta_max = r.or_default(f.eta_max, "fedsa.eta_max", SearchSpace::DEFAULT_ETA.1);
            let tau_min = r.or_default(f.tau_min, "fedsa.tau_min", SearchSpace::DEFAULT_TAU.0);
            let tau_max = r.or_default(f.tau_max, "fedsa.tau_max", SearchSpace::DEFAULT_TAU.1);
            let t_init = r.or_default(f.t_init, "fedsa.t_init", FedSaConfig::DEFAULT_T_INIT);
            let alpha = r.or_default(f.alpha, "fedsa.alpha", FedSaConfig::DEFAULT_ALPHA);
            let epsilon = r.or_default(f.epsilon, "fedsa.epsilon", FedSaConfig::DEFAULT_EPSILON);
            let cooling = r.or_default(f.cooling, "fedsa.cooling", Cooling::Complement);
            ensure(
                eta_min > 0.0 && eta_min <= eta_max && eta_max.is_finite(),
                "fedsa.eta_min",
                format!("learning-rate bounds [{eta_min}, {eta_max}] must satisfy 0 < eta_min <= eta_max"),
            )?;
            ensure(
                tau_min >= 1 && tau_min <= tau_max,
                "fedsa.tau_min",
                format!("local-update bounds [{tau_min}, {tau_max}] must satisfy 1 <= tau_min <= tau_max"),
            )?;
            check_t_init(t_init, "fedsa.t_init")?;
            check_alpha(alpha, "fedsa.alpha")?;
            ensure(
                epsilon > 0.0 && epsilon < 1.0,
                "fedsa.epsilon",
                format!("step constant must satisfy 0 < epsilon < 1, got {epsilon}"),
            )?;
            Some(FedSaSettings {
                eta_min,
                eta_max,
                tau_min,
                tau_max,
                t_init,
                alpha,
                epsilon,
                epochs,
                cooling,
            })
        }
        None if driver == Driver::Fedsa => return Err(Error::config("fedsa", "section required by driver `fedsa`")),
        None => None,
    };

    let sweep = match raw.sweep {
        Some(s) => {
            let t_init = r.or_default(s.t_init, "sweep.t_init", DEFAULT_SWEEP_T_INIT.to_vec());
            let alpha = r.or_default(s.alpha, "sweep.alpha", DEFAULT_SWEEP_ALPHA.to_vec());
            let seeds = r.or_default(s.seeds, "sweep.seeds", DEFAULT_SWEEP_SEEDS.to_vec());
            ensure(!t_init.is_empty(), "sweep.t_init", "grid axis is empty")?;
            ensure(!alpha.is_empty(), "sweep.alpha", "grid axis is empty")?;
            ensure(!seeds.is_empty(), "sweep.seeds", "no seeds given")?;
            for &t in &t_init {
                check_t_init(t, "sweep.t_init")?;
            }
            for &a in &alpha {
                check_alpha(a, "sweep.alpha")?;
            }
            Some(SweepGrid { t_init, alpha, seeds })
        }
        None => None,
    };

    let train_fraction = r.or_default(raw.train_fraction, "train_fraction", 0.7);
    ensure(
        train_fraction > 0.0 && train_fraction < 1.0,
        "train_fraction",
        format!("must lie in (0, 1), got {train_fraction}"),
    )?;
    let balanced_split = r.or_default(raw.balanced_split, "balanced_split", false);
    let output = r.or_default(raw.output, "output", PathBuf::from("runs").join(driver.to_string()));
    let target_accuracy = r.or_default(raw.target_accuracy, "target_accuracy", 0.95);
    ensure(
        target_accuracy > 0.0 && target_accuracy <= 1.0,
        "target_accuracy",
        format!("must lie in (0, 1], got {target_accuracy}"),
    )?;
    let precision = r.or_default(raw.precision, "precision", Precision::F64);
    let dump_normalized = r.or_default(raw.dump_normalized, "dump_normalized", false);

    Ok(ParsedConfig {
        config: ExperimentConfig {
            driver,
            seed,
            data_seed,
            data,
            n_participants,
            subset_size,
            batch_size,
            hidden,
            activation,
            fedavg,
            fedsa,
            sweep,
            train_fraction,
            balanced_split,
            output,
            target_accuracy,
            precision,
            dump_normalized,
        },
        defaults_applied: r.applied,
    })
}

impl ExperimentConfig {
    fn to_raw(&self) -> RawConfig {
        let data = match &self.data {
            DataSource::Synthetic {
                n_samples,
                n_features,
                class_ratio,
                separation,
            } => RawData {
                synthetic: Some(RawSynthetic {
                    n_samples: Some(*n_samples),
                    n_features: Some(*n_features),
                    class_ratio: Some(*class_ratio),
                    separation: Some(*separation),
                }),
                csv: None,
            },
            DataSource::Csv { paths, schema } => RawData {
                synthetic: None,
                csv: Some(RawCsv {
                    paths: Some(paths.clone()),
                    label_column: Some(schema.label_column.clone()),
                    drop_columns: Some(schema.drop_columns.clone()),
                    benign_labels: Some(schema.benign_labels.clone()),
                }),
            },
        };
        RawConfig {
            driver: Some(self.driver),
            seed: Some(self.seed),
            data_seed: Some(self.data_seed),
            train_fraction: Some(self.train_fraction),
            balanced_split: Some(self.balanced_split),
            output: Some(self.output.clone()),
            target_accuracy: Some(self.target_accuracy),
            precision: Some(self.precision),
            dump_normalized: Some(self.dump_normalized),
            data: Some(data),
            federation: Some(RawFederation {
                n_participants: Some(self.n_participants),
                subset_size: Some(self.subset_size),
                batch_size: Some(self.batch_size),
            }),
            model: Some(RawModel {
                hidden: Some(self.hidden.clone()),
                activation: Some(self.activation),
            }),
            fedavg: self.fedavg.map(|f| RawFedAvg {
                tau: Some(f.tau),
                eta0: Some(f.eta0),
                rounds: Some(f.rounds),
            }),
            fedsa: self.fedsa.map(|f| RawFedSa {
                eta_min: Some(f.eta_min),
                eta_max: Some(f.eta_max),
                tau_min: Some(f.tau_min),
                tau_max: Some(f.tau_max),
                t_init: Some(f.t_init),
                alpha: Some(f.alpha),
                epsilon: Some(f.epsilon),
                epochs: Some(f.epochs),
                cooling: Some(f.cooling),
            }),
            sweep: self.sweep.as_ref().map(|s| RawSweep {
                t_init: Some(s.t_init.clone()),
                alpha: Some(s.alpha.clone()),
                seeds: Some(s.seeds.clone()),
            }),
        }
    }

    /// The resolved config as a TOML document that parses back to `self`.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(&self.to_raw()).map_err(|e| Error::config("<document>", e.to_string()))
    }

    pub fn federation_config(&self) -> FederationConfig {
        FederationConfig {
            n_participants: self.n_participants,
            subset_size: self.subset_size,
            batch_size: self.batch_size,
            seed: self.seed,
        }
    }

    pub fn search_space(&self) -> Option<SearchSpace> {
        self.fedsa.map(|f| SearchSpace {
            eta_min: f.eta_min,
            eta_max: f.eta_max,
            tau_min: f.tau_min,
            tau_max: f.tau_max,
            mu: (0..self.n_participants).collect(),
            k: self.subset_size,
        })
    }

    pub fn fedsa_config(&self) -> Option<FedSaConfig> {
        self.fedsa.map(|f| FedSaConfig {
            t_init: f.t_init,
            alpha: f.alpha,
            epsilon: f.epsilon,
            epochs: f.epochs,
            seed: self.seed,
            cooling: f.cooling,
        })
    }

    pub fn network_spec(&self, input_dim: usize) -> NetworkSpec {
        NetworkSpec {
            input_dim,
            hidden: self.hidden.clone(),
            output_dim: 2,
            activation: self.activation,
        }
    }

    pub fn split_mode(&self) -> SplitMode {
        if self.balanced_split {
            SplitMode::Balanced
        } else {
            SplitMode::Random
        }
    }
}

// ---------------------------------------------------------------------------
// Data pipeline

/// Normalized splits and participant shards for one experiment.
#[derive(Debug, Clone)]
pub struct PreparedData<T> {
    pub train: Dataset<T>,
    pub validation: Dataset<T>,
    pub shards: Vec<Shard<T>>,
    pub load_report: Option<LoadReport>,
    pub split_mode: SplitMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub split_mode: SplitMode,
    pub n_features: usize,
    pub train_rows: usize,
    pub validation_rows: usize,
    pub shard_rows: usize,
    pub train_attack_fraction: f64,
    pub validation_attack_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub load_report: Option<LoadReport>,
}

impl<T: Scalar> PreparedData<T> {
    pub fn summary(&self) -> DataSummary {
        let frac = |d: &Dataset<T>| d.attack_count() as f64 / d.len().max(1) as f64;
        DataSummary {
            split_mode: self.split_mode,
            n_features: self.train.n_features(),
            train_rows: self.train.len(),
            validation_rows: self.validation.len(),
            shard_rows: self.shards.first().map_or(0, Shard::len),
            train_attack_fraction: frac(&self.train),
            validation_attack_fraction: frac(&self.validation),
            load_report: self.load_report.clone(),
        }
    }
}

fn data_error(source: &DataSource, err: Error) -> Error {
    match err {
        Error::InvalidInput(message) | Error::Dimension(message) => Error::Data {
            path: match source {
                DataSource::Synthetic { .. } => PathBuf::from("<synthetic>"),
                DataSource::Csv { paths, .. } => paths.first().cloned().unwrap_or_default(),
            },
            message,
        },
        other => other,
    }
}

/// Load or generate, split, scale with training statistics, then shard.
pub fn prepare_data<T: Scalar>(cfg: &ExperimentConfig) -> Result<PreparedData<T>> {
    let wrap = |e| data_error(&cfg.data, e);
    let (dataset, load_report) = match &cfg.data {
        DataSource::Synthetic {
            n_samples,
            n_features,
            class_ratio,
            separation,
        } => {
            let spec = SynthSpec {
                n_samples: *n_samples,
                n_features: *n_features,
                class_ratio: *class_ratio,
                separation: *separation,
                seed: derive_seed(cfg.data_seed, &[STREAM_SYNTH]),
            };
            (data::synth_generate::<T>(&spec).map_err(wrap)?, None)
        }
        DataSource::Csv { paths, schema } => {
            let (d, report) = data::load_csv_files::<T>(paths, schema)?;
            (d, Some(report))
        }
    };
    let (train, validation) = if cfg.balanced_split {
        data::split_balanced(&dataset, cfg.train_fraction, derive_seed(cfg.data_seed, &[STREAM_BALANCE]))
    } else {
        data::split(&dataset, cfg.train_fraction, derive_seed(cfg.data_seed, &[STREAM_SPLIT]))
    }
    .map_err(wrap)?;
    drop(dataset);
    let (train, mut others, _) = data::normalize(&train, &[validation]).map_err(wrap)?;
    let validation = others.pop().expect("one dataset in, one out");
    let shards = data::shard_dataset(&train, cfg.n_participants, derive_seed(cfg.data_seed, &[STREAM_SHARD]))
        .map_err(wrap)?;
    Ok(PreparedData {
        train,
        validation,
        shards,
        load_report,
        split_mode: cfg.split_mode(),
    })
}

// ---------------------------------------------------------------------------
// Drivers

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedSaSummary {
    pub best_solution: SolutionSnapshot,
    pub final_temperature: f64,
    pub cooling_events: usize,
    pub worse_acceptances: usize,
    pub reinitializations: usize,
}

#[derive(Debug, Clone)]
pub struct DriverOutput {
    pub records: Vec<RoundRecord>,
    pub fedsa: Option<FedSaSummary>,
    pub best_solution: Option<Solution>,
}

/// Runs the configured driver on prepared data, passing each record to `sink`.
pub fn run_driver<T: Scalar>(
    cfg: &ExperimentConfig,
    prepared: &PreparedData<T>,
    sink: &mut dyn FnMut(&RoundRecord) -> Result<()>,
) -> Result<DriverOutput> {
    let spec = cfg.network_spec(prepared.train.n_features());
    let initial = init_params::<T>(&spec, derive_seed(cfg.seed, &[STREAM_INIT]))?;
    match cfg.driver {
        Driver::Centralized => {
            let fedavg = cfg.fedavg.ok_or_else(|| Error::config("fedavg", "section required by driver `centralized`"))?;
            let run = run_centralized_with(
                &prepared.train,
                &prepared.validation,
                &fedavg,
                cfg.batch_size,
                cfg.seed,
                initial,
                sink,
            )?;
            Ok(DriverOutput {
                records: run.records,
                fedsa: None,
                best_solution: None,
            })
        }
        Driver::Fedavg | Driver::Fedsa => {
            let federation = Federation::new(
                cfg.federation_config(),
                prepared.shards.clone(),
                prepared.validation.clone(),
            )?;
            if cfg.driver == Driver::Fedavg {
                let fedavg = cfg.fedavg.ok_or_else(|| Error::config("fedavg", "section required by driver `fedavg`"))?;
                let run = run_fedavg_with(&federation, &fedavg, initial, sink)?;
                return Ok(DriverOutput {
                    records: run.records,
                    fedsa: None,
                    best_solution: None,
                });
            }
            let space = cfg.search_space().ok_or_else(|| Error::config("fedsa", "section required by driver `fedsa`"))?;
            let sa_cfg = cfg.fedsa_config().expect("fedsa settings present with search space");
            let run = run_fedsa_with(&federation, &space, &sa_cfg, initial, sink)?;
            Ok(DriverOutput {
                fedsa: Some(FedSaSummary {
                    best_solution: run.best.snapshot(),
                    final_temperature: run.final_state.temperature,
                    cooling_events: run.cooling_events,
                    worse_acceptances: run.worse_acceptances,
                    reinitializations: run.reinitializations,
                }),
                best_solution: Some(run.best),
                records: run.records,
            })
        }
    }
}

// ---------------------------------------------------------------------------
// Run directories and summaries

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundBrief {
    pub round_index: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub loss: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub driver: Driver,
    pub seed: u64,
    pub data_seed: u64,
    pub precision: Precision,
    /// Number of aggregation rounds (centralized: training blocks).
    pub total_aggregation_rounds: usize,
    pub best_round: Option<RoundBrief>,
    pub final_metrics: Option<FinalMetrics>,
    pub target_accuracy: f64,
    pub rounds_to_target: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fedsa: Option<FedSaSummary>,
    pub data: DataSummary,
    pub defaults_applied: Vec<String>,
    pub wall_time_secs: f64,
}

/// Highest accuracy, earliest round on ties.
pub fn best_round(records: &[RoundRecord]) -> Option<RoundBrief> {
    records
        .iter()
        .fold(None::<&RoundRecord>, |best, r| match best {
            Some(b) if b.accuracy >= r.accuracy => Some(b),
            _ => Some(r),
        })
        .map(|r| RoundBrief {
            round_index: r.round_index,
            loss: r.loss,
            accuracy: r.accuracy,
        })
}

fn summarize(
    cfg: &ExperimentConfig,
    defaults_applied: &[String],
    data: DataSummary,
    output: &DriverOutput,
    wall_time_secs: f64,
) -> Summary {
    let records = &output.records;
    Summary {
        driver: cfg.driver,
        seed: cfg.seed,
        data_seed: cfg.data_seed,
        precision: cfg.precision,
        total_aggregation_rounds: records.len(),
        best_round: best_round(records),
        final_metrics: records.last().map(|r| FinalMetrics {
            loss: r.loss,
            accuracy: r.accuracy,
            precision: r.precision,
            sensitivity: r.sensitivity,
            specificity: r.specificity,
            f1: r.f1,
        }),
        target_accuracy: cfg.target_accuracy,
        rounds_to_target: rounds_to_accuracy(records, cfg.target_accuracy),
        fedsa: output.fedsa.clone(),
        data,
        defaults_applied: defaults_applied.to_vec(),
        wall_time_secs,
    }
}

fn dir_is_empty(path: &Path) -> bool {
    fs::read_dir(path).map(|mut it| it.next().is_none()).unwrap_or(false)
}

/// Creates `base`, or `base-<unix seconds>[-n]` when `base` already holds files.
pub fn create_run_dir(base: &Path) -> Result<PathBuf> {
    let dir = if !base.exists() || dir_is_empty(base) {
        base.to_owned()
    } else {
        let stamp = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or_default();
        let name = base.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let mut candidate = base.with_file_name(format!("{name}-{stamp}"));
        let mut n = 1;
        while candidate.exists() {
            candidate = base.with_file_name(format!("{name}-{stamp}-{n}"));
            n += 1;
        }
        candidate
    };
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn write_config_echo(dir: &Path, parsed: &ParsedConfig) -> Result<()> {
    let path = dir.join(CONFIG_ECHO_FILE);
    let mut text = String::new();
    for d in &parsed.defaults_applied {
        text.push_str(&format!("# default applied: {d}\n"));
    }
    text.push_str(&parsed.config.to_toml()?);
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

struct RecordWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl RecordWriter {
    fn create(path: PathBuf) -> Result<Self> {
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(RecordWriter {
            path,
            out: BufWriter::new(file),
        })
    }

    fn write(&mut self, record: &RoundRecord) -> Result<()> {
        let line = serde_json::to_string(record)?;
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub records: Vec<RoundRecord>,
    pub summary: Summary,
}

/// Writes one run into `dir` using already prepared data.
fn execute_into<T: Scalar>(
    dir: &Path,
    parsed: &ParsedConfig,
    prepared: &PreparedData<T>,
    progress: &(dyn Fn(&RoundRecord) + Sync),
) -> Result<RunArtifacts> {
    let started = Instant::now();
    write_config_echo(dir, parsed)?;
    let mut writer = RecordWriter::create(dir.join(RECORDS_FILE))?;
    let output = run_driver(&parsed.config, prepared, &mut |record| {
        progress(record);
        writer.write(record)
    })?;
    let summary = summarize(
        &parsed.config,
        &parsed.defaults_applied,
        prepared.summary(),
        &output,
        started.elapsed().as_secs_f64(),
    );
    write_json(&dir.join(SUMMARY_FILE), &summary)?;
    Ok(RunArtifacts {
        dir: dir.to_owned(),
        records: output.records,
        summary,
    })
}

fn run_typed<T: Scalar>(parsed: &ParsedConfig, progress: &(dyn Fn(&RoundRecord) + Sync)) -> Result<RunArtifacts> {
    let cfg = &parsed.config;
    let prepared = prepare_data::<T>(cfg)?;
    let dir = create_run_dir(&cfg.output)?;
    if cfg.dump_normalized {
        data::write_csv(&prepared.train, &dir.join("train_normalized.csv"))?;
        data::write_csv(&prepared.validation, &dir.join("validation_normalized.csv"))?;
    }
    execute_into(&dir, parsed, &prepared, progress)
}

/// Full pipeline: data, driver, run directory.
pub fn run_experiment(parsed: &ParsedConfig) -> Result<RunArtifacts> {
    run_experiment_with_progress(parsed, &|_| {})
}

pub fn run_experiment_with_progress(
    parsed: &ParsedConfig,
    progress: &(dyn Fn(&RoundRecord) + Sync),
) -> Result<RunArtifacts> {
    match parsed.config.precision {
        Precision::F64 => run_typed::<f64>(parsed, progress),
        Precision::F32 => run_typed::<f32>(parsed, progress),
    }
}

// ---------------------------------------------------------------------------
// Sweeps

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub t_init: f64,
    pub alpha: f64,
    pub seeds: Vec<u64>,
    pub final_accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    /// Sample standard deviation over seeds (0 for a single seed).
    pub std_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub epochs: usize,
    pub cells: Vec<SweepCell>,
    /// Largest minus smallest cell mean.
    pub mean_spread: f64,
    pub max_std: f64,
    pub wall_time_secs: f64,
}

#[derive(Debug, Clone)]
pub struct SweepArtifacts {
    pub dir: PathBuf,
    pub summary: SweepSummary,
}

pub fn mean_and_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Config of one sweep run: the grid point's temperature, cooling constant
/// and seed, with the data seed held fixed.
pub fn sweep_cell_config(parsed: &ParsedConfig, t_init: f64, alpha: f64, seed: u64) -> ParsedConfig {
    let mut p = parsed.clone();
    p.config.seed = seed;
    p.config.data_seed = parsed.config.data_seed;
    if let Some(f) = p.config.fedsa.as_mut() {
        f.t_init = t_init;
        f.alpha = alpha;
    }
    p
}

fn sweep_typed<T: Scalar>(parsed: &ParsedConfig) -> Result<SweepArtifacts> {
    let started = Instant::now();
    let cfg = &parsed.config;
    let grid = cfg
        .sweep
        .clone()
        .unwrap_or_else(|| SweepGrid {
            t_init: DEFAULT_SWEEP_T_INIT.to_vec(),
            alpha: DEFAULT_SWEEP_ALPHA.to_vec(),
            seeds: DEFAULT_SWEEP_SEEDS.to_vec(),
        });
    let prepared = prepare_data::<T>(cfg)?;
    let root = create_run_dir(&cfg.output)?;
    write_config_echo(&root, parsed)?;
    let mut jobs = Vec::new();
    for &alpha in &grid.alpha {
        for &t_init in &grid.t_init {
            for &seed in &grid.seeds {
                jobs.push((t_init, alpha, seed));
            }
        }
    }
    let finals: Vec<f64> = jobs
        .par_iter()
        .map(|&(t_init, alpha, seed)| {
            let run_cfg = sweep_cell_config(parsed, t_init, alpha, seed);
            let dir = root.join(format!("t{t_init}_a{alpha}")).join(format!("seed{seed}"));
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let run = execute_into(&dir, &run_cfg, &prepared, &|_| {})?;
            Ok(run.records.last().map_or(f64::NAN, |r| r.accuracy))
        })
        .collect::<Result<_>>()?;
    let per_cell = grid.seeds.len();
    let cells: Vec<SweepCell> = jobs
        .chunks(per_cell)
        .zip(finals.chunks(per_cell))
        .map(|(job, acc)| {
            let (mean, std) = mean_and_std(acc);
            SweepCell {
                t_init: job[0].0,
                alpha: job[0].1,
                seeds: grid.seeds.clone(),
                final_accuracies: acc.to_vec(),
                mean_accuracy: mean,
                std_accuracy: std,
            }
        })
        .collect();
    let means = cells.iter().map(|c| c.mean_accuracy);
    let hi = means.clone().fold(f64::NEG_INFINITY, f64::max);
    let lo = means.fold(f64::INFINITY, f64::min);
    let summary = SweepSummary {
        epochs: cfg.fedsa.map_or(0, |f| f.epochs),
        mean_spread: hi - lo,
        max_std: cells.iter().map(|c| c.std_accuracy).fold(0.0, f64::max),
        cells,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    write_json(&root.join(SWEEP_SUMMARY_FILE), &summary)?;
    Ok(SweepArtifacts { dir: root, summary })
}

/// Runs FedSA over every `(t_init, alpha, seed)` grid point on one dataset.
pub fn run_sweep(parsed: &ParsedConfig) -> Result<SweepArtifacts> {
    if parsed.config.driver != Driver::Fedsa {
        return Err(Error::config("driver", "a sweep requires driver = \"fedsa\""));
    }
    match parsed.config.precision {
        Precision::F64 => sweep_typed::<f64>(parsed),
        Precision::F32 => sweep_typed::<f32>(parsed),
    }
}
