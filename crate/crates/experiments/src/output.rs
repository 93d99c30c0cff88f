//! Result files: config echo, CSV logs and JSON summaries.

use std::fs;
use std::path::{Path, PathBuf};

use blaq_core::metrics::TrajectoryRecord;
use serde::Serialize;
use thiserror::Error;

pub const TRAJECTORY_HEADER: [&str; 6] = ["step", "loss", "coord_id", "w", "w_hat", "delta_w"];
pub const TRAINING_HEADER: [&str; 3] = ["epoch", "train_loss", "test_accuracy"];

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot write {path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("cannot serialize {path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
}

/// A named pass/fail condition evaluated at the end of a run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail: detail.into(),
        }
    }
}

pub fn ensure_dir(dir: &Path) -> Result<(), OutputError> {
    fs::create_dir_all(dir).map_err(|source| OutputError::Io {
        path: dir.to_path_buf(),
        source,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), OutputError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| OutputError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|source| OutputError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// One row per recorded step and listed coordinate. `coord_ids` gives the
/// identifier written for each position of `coords`.
pub fn write_trajectory_csv(
    path: &Path,
    record: &TrajectoryRecord,
    coords: &[usize],
    coord_ids: &[usize],
) -> Result<(), OutputError> {
    let err = |source| OutputError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(TRAJECTORY_HEADER).map_err(err)?;
    for s in record.steps() {
        for (&c, id) in coords.iter().zip(coord_ids) {
            w.write_record([
                s.step.to_string(),
                s.loss.to_string(),
                id.to_string(),
                s.w[c].to_string(),
                s.w_hat[c].to_string(),
                s.update[c].to_string(),
            ])
            .map_err(err)?;
        }
    }
    w.flush().map_err(|source| OutputError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_accuracy: f64,
}

pub fn write_training_csv(path: &Path, rows: &[EpochRow]) -> Result<(), OutputError> {
    let err = |source| OutputError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(TRAINING_HEADER).map_err(err)?;
    for r in rows {
        w.write_record([r.epoch.to_string(), r.train_loss.to_string(), r.test_accuracy.to_string()])
            .map_err(err)?;
    }
    w.flush().map_err(|source| OutputError::Io {
        path: path.to_path_buf(),
        source,
    })
}
