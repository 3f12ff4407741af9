//! Command-line front end: configuration, experiment orchestration, report
//! emission and the acceptance suite.

pub mod commands;
pub mod config;
pub mod experiment;
pub mod report;
pub mod verify;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error(transparent)]
    Numerics(#[from] torus_schrodinger::Error),
    #[error("input: {0}")]
    Input(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
