//! Experiment configuration: built-in defaults per experiment, overlaid by
//! an optional JSON file and then by `--key value` command-line overrides.

use std::fmt;
use std::path::{Path, PathBuf};

use blaq_core::curvature::{LrSchedule, Metric};
use blaq_core::optimizers::BlaqConfig;
use blaq_core::quantizer::QuantGrid;
use blaq_core::theory::SuiteConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

/// Environment variable naming the MNIST cache directory.
pub const DATA_DIR_ENV: &str = "BLAQ_MNIST_DIR";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config file {path} is not valid JSON: {source}")]
    Parse {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("config file must hold a JSON object")]
    NotObject,
    #[error("override `{0}` has no value")]
    MissingValue(String),
    #[error("expected `--key value`, found `{0}`")]
    BadOverride(String),
    #[error("cannot override `{key}`: `{parent}` is not an object")]
    NotNested { key: String, parent: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Toy2d,
    ToyPow32,
    TrainMnist,
    TheoryCheck,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Toy2d => "toy2d",
            Experiment::ToyPow32 => "toy-pow32",
            Experiment::TrainMnist => "train-mnist",
            Experiment::TheoryCheck => "theory-check",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Laq,
    Blaq,
    FullPrecision,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Laq => "laq",
            OptimizerKind::Blaq => "blaq",
            OptimizerKind::FullPrecision => "full-precision",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub optimizer: OptimizerKind,
    pub bits: u32,
    pub a: f64,
    pub m: usize,
    /// Piecewise-constant learning rate as `(start, value)` pairs. Starts
    /// count optimizer steps for toy runs and epochs for MNIST.
    pub eta: Vec<(u64, f64)>,
    pub metric: Metric,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub steps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub output_dir: PathBuf,
    /// Starting point of toy runs.
    pub w0: Vec<f64>,
    /// Coefficient of the ω^{3/2} toy objective.
    pub c: f64,
    /// Trailing window, in steps, for zig-zag metrics.
    pub window: usize,
    /// Loss tolerance above the quantized optimum for convergence speed.
    pub tol: f64,
    /// toy2d only: run every optimizer and bitwidth and report orderings.
    pub compare: bool,
    /// Number of weight coordinates sampled for per-coordinate traces.
    pub coords: usize,
    pub hidden: Vec<usize>,
    /// MNIST directory; falls back to the environment, then a user cache.
    pub data_dir: Option<PathBuf>,
    /// Optional base URL from which missing MNIST files are fetched.
    pub mirror: Option<String>,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    /// MNIST only: fail the run if final test accuracy is below this.
    pub min_accuracy: Option<f64>,
    /// Exit with status 1 when a run's built-in checks fail.
    pub assert: bool,
    pub theory: SuiteConfig,
}

impl ExperimentConfig {
    /// Defaults for `experiment` as a JSON object.
    pub fn defaults(experiment: Experiment) -> Value {
        let mut cfg = ExperimentConfig {
            experiment,
            optimizer: OptimizerKind::Blaq,
            bits: 1,
            a: 0.6,
            m: 5,
            eta: vec![(0, 0.01)],
            metric: Metric::SecondMoment,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            steps: 1000,
            epochs: 20,
            batch_size: 128,
            output_dir: PathBuf::from("runs").join(experiment.name()),
            w0: vec![1.0, 1.0],
            c: 1.0,
            window: 100,
            tol: 1e-4,
            compare: false,
            coords: 8,
            hidden: vec![256, 128, 64],
            data_dir: None,
            mirror: None,
            train_limit: None,
            test_limit: None,
            min_accuracy: None,
            assert: true,
            theory: SuiteConfig::default(),
        };
        match experiment {
            Experiment::Toy2d => {}
            Experiment::ToyPow32 => cfg.w0 = vec![1.0],
            Experiment::TrainMnist => cfg.eta = vec![(0, 0.005), (10, 0.0025), (15, 0.00125)],
            Experiment::TheoryCheck => {}
        }
        serde_json::to_value(cfg).expect("config serializes")
    }

    /// Defaults, then `file` (if any), then `overrides`.
    pub fn load(
        experiment: Experiment,
        file: Option<&Path>,
        overrides: &[(String, String)],
    ) -> Result<Self, ConfigError> {
        let mut value = Self::defaults(experiment);
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
                path: path.to_path_buf(),
                source,
            })?;
            let patch: Value = serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
                path: path.to_path_buf(),
                source,
            })?;
            let Value::Object(patch) = patch else {
                return Err(ConfigError::NotObject);
            };
            merge(&mut value, patch);
        }
        for (key, raw) in overrides {
            set_path(&mut value, key, parse_scalar(raw))?;
        }
        // The subcommand decides the experiment regardless of file contents.
        value["experiment"] = serde_json::to_value(experiment).expect("enum serializes");
        let cfg: Self = serde_json::from_value(value).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: String| Err(ConfigError::Invalid(msg));
        QuantGrid::new(self.bits).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        BlaqConfig::new(self.a, self.m).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.schedule()?;
        if !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("beta2 must lie in [0, 1), got {}", self.beta2));
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        if !(self.tol > 0.0) {
            return bad(format!("tol must be positive, got {}", self.tol));
        }
        if self.window < 2 {
            return bad("window must cover at least two steps".into());
        }
        if self.w0.iter().any(|x| !x.is_finite()) {
            return bad("w0 must be finite".into());
        }
        match self.experiment {
            Experiment::Toy2d => {
                if self.w0.len() != 2 {
                    return bad(format!("toy2d needs a 2-D w0, got {} entries", self.w0.len()));
                }
                if self.steps < self.window {
                    return bad("steps must be at least window".into());
                }
            }
            Experiment::ToyPow32 => {
                if self.w0.len() != 1 {
                    return bad(format!("toy-pow32 needs a scalar w0, got {} entries", self.w0.len()));
                }
                if !(self.c > 0.0) {
                    return bad(format!("c must be positive, got {}", self.c));
                }
                if self.steps < self.window {
                    return bad("steps must be at least window".into());
                }
            }
            Experiment::TrainMnist => {
                if self.epochs == 0 || self.batch_size == 0 {
                    return bad("epochs and batch_size must be positive".into());
                }
                if self.hidden.is_empty() || self.hidden.contains(&0) {
                    return bad("hidden layer widths must be positive".into());
                }
                if matches!(self.train_limit, Some(0)) || matches!(self.test_limit, Some(0)) {
                    return bad("sample limits must be positive".into());
                }
            }
            Experiment::TheoryCheck => {
                self.theory.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
            }
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<LrSchedule, ConfigError> {
        LrSchedule::new(self.eta.clone()).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn blaq(&self) -> BlaqConfig {
        BlaqConfig { a: self.a, m: self.m }
    }

    pub fn grid(&self) -> QuantGrid {
        QuantGrid::new(self.bits).expect("validated")
    }

    /// Directory holding the MNIST IDX files.
    pub fn resolve_data_dir(&self) -> PathBuf {
        if let Some(dir) = &self.data_dir {
            return dir.clone();
        }
        if let Some(dir) = std::env::var_os(DATA_DIR_ENV) {
            return PathBuf::from(dir);
        }
        let home = std::env::var_os("HOME").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."));
        home.join(".cache").join("blaq").join("mnist")
    }
}

/// Splits `--key value` pairs. `--config <path>` is pulled out separately.
pub fn parse_overrides(args: &[String]) -> Result<(Option<PathBuf>, Vec<(String, String)>), ConfigError> {
    let mut config = None;
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let Some(key) = arg.strip_prefix("--").filter(|k| !k.is_empty()) else {
            return Err(ConfigError::BadOverride(arg.clone()));
        };
        let (key, value) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| ConfigError::MissingValue(key.to_string()))?;
                (key.to_string(), v.clone())
            }
        };
        if key == "config" {
            config = Some(PathBuf::from(value));
        } else {
            out.push((key.replace('-', "_"), value));
        }
    }
    Ok((config, out))
}

/// JSON if it parses as JSON, otherwise a plain string.
fn parse_scalar(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn merge(base: &mut Value, patch: Map<String, Value>) {
    for (k, v) in patch {
        match (base.get_mut(&k), v) {
            (Some(Value::Object(b)), Value::Object(p)) if !p.is_empty() => {
                let mut inner = Value::Object(std::mem::take(b));
                merge(&mut inner, p);
                base[&k] = inner;
            }
            (_, v) => {
                base[&k] = v;
            }
        }
    }
}

/// Sets a dotted key such as `theory.steps`.
fn set_path(root: &mut Value, key: &str, value: Value) -> Result<(), ConfigError> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields one part");
    let mut cur = root;
    let mut walked = String::new();
    for p in parts {
        if !walked.is_empty() {
            walked.push('.');
        }
        walked.push_str(p);
        cur = match cur.get_mut(p) {
            Some(v @ Value::Object(_)) => v,
            _ => {
                return Err(ConfigError::NotNested {
                    key: key.to_string(),
                    parent: walked,
                })
            }
        };
    }
    match cur {
        Value::Object(map) => {
            map.insert(last.to_string(), value);
            Ok(())
        }
        _ => Err(ConfigError::NotNested {
            key: key.to_string(),
            parent: walked,
        }),
    }
}
