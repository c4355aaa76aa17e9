//! Experiment runner for the `dalvq` binary: configuration parsing, run
//! orchestration, artifact persistence and cross-run reports.

pub mod commands;
pub mod config;
pub mod report;

pub use config::{parse_config, parse_config_str, Diagnostics, ExperimentConfig, Mode};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, thiserror::Error)]
pub enum Failure {
    #[error("{0}")]
    Config(String),
    #[error("assumption validation failed: {}", .0.join(", "))]
    Validation(Vec<String>),
    #[error("{0}")]
    Runtime(String),
}

impl Failure {
    pub fn config(msg: impl Into<String>) -> Self {
        Failure::Config(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        Failure::Runtime(msg.into())
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Validation(_) => 3,
            Failure::Runtime(_) => 4,
        }
    }
}

impl From<dalvq::Error> for Failure {
    fn from(e: dalvq::Error) -> Self {
        match e {
            dalvq::Error::Config(_) | dalvq::Error::Usage(_) => Failure::Config(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(format!("i/o error: {e}"))
    }
}
