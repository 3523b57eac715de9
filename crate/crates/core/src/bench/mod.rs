//! Run configuration, the evaluation matrix, result CSVs, summary tables and
//! the gradient-check suite behind the command-line tool.

mod config;
mod matrix;
mod report;
mod suite;

pub use config::{EvalConfig, RunConfig};
pub use matrix::{cells, run_cell, run_cells, threads_from_env, AblationRow, Cell, CellOutput, THREADS_ENV};
pub use report::{
    read_results, relative_improvement, write_results, ResultRow, SummaryTable, IMPROVEMENT_EPSILON, RESULT_HEADER,
};
pub use suite::{check_op, gradcheck_suite, GRADCHECK_TOLERANCE, SUITE_OPS};

use crate::adapt::AdaptError;
use crate::agent::AgentError;
use crate::autodiff::TensorError;
use crate::world::WorldError;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error(transparent)]
    Adapt(#[from] AdaptError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed csv {0}")]
    Csv(String),
    #[error("inconsistent result schemas: {0}")]
    Schema(String),
}

impl BenchError {
    /// Whether the failure came from the filesystem rather than from the inputs.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            BenchError::Io { .. }
                | BenchError::Agent(AgentError::Io { .. })
                | BenchError::World(WorldError::Io { .. })
                | BenchError::Adapt(AdaptError::Agent(AgentError::Io { .. }))
        )
    }
}
