//! Experiment runners for loss-aware quantization: toy trajectories, the
//! 3/2-power oscillation example, MNIST training and the quadratic theory
//! suite, plus their configuration, data loading and result files.

pub mod config;
pub mod data;
pub mod error;
pub mod mnist;
pub mod output;
pub mod theory_check;
pub mod toy;

use config::{Experiment, ExperimentConfig};
use error::RunError;
use output::Check;

/// Runs the experiment named in `cfg` and returns its checks.
pub fn run(cfg: &ExperimentConfig) -> Result<Vec<Check>, RunError> {
    match cfg.experiment {
        Experiment::Toy2d => toy::run_toy2d(cfg),
        Experiment::ToyPow32 => toy::run_toy_pow32(cfg),
        Experiment::TrainMnist => Ok(mnist::run_train_mnist(cfg)?.checks),
        Experiment::TheoryCheck => Ok(theory_check::run_theory_check(cfg)?.1),
    }
}
