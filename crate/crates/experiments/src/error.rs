use blaq_core::autodiff::GraphError;
use blaq_core::metrics::MetricsError;
use blaq_core::optimizers::OptimError;
use blaq_core::theory::TheoryError;
use thiserror::Error;

use crate::config::ConfigError;
use crate::data::DataError;
use crate::output::OutputError;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Output(#[from] OutputError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Theory(#[from] TheoryError),
}

impl RunError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Data(_) => 2,
            _ => 1,
        }
    }
}
