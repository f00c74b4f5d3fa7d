//! Command-line driver: configuration, resumable runs, evaluation reports,
//! fine-tuning export and analysis studies.

pub mod commands;
pub mod config;
pub mod error;
pub mod report;
pub mod runner;
pub mod study;
pub mod synth;

pub use commands::{execute, Cli};
pub use config::RunConfig;
pub use error::{exit_code, ExitCode};
