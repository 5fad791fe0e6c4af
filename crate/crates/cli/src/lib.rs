//! Experiment driver around `btw-core`: single runs, seed ensembles, the
//! verification suite and bound tables.

// `!(x > 0.0)` style guards are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod presets;

pub use commands::{
    cmd_bound, cmd_extinction_stats, cmd_simulate, cmd_verify, BoundOutput, StatsRow, StatsSummary, Summary,
    VerifyReport,
};
pub use config::{RunConfig, SeedRange};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad configuration; nothing was computed or written.
    #[error("invalid configuration: {0}")]
    Validation(String),
    #[error(transparent)]
    Core(#[from] btw_core::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("all {0} replicas failed")]
    AllReplicasFailed(usize),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            _ => 1,
        }
    }
}
