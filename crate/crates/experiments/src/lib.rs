//! Configuration-driven ladder studies on top of `pdmp-core`.

pub mod config;
pub mod report;
pub mod studies;

pub use config::{ExperimentConfig, Setup, StudyKind};
pub use report::{StudyReport, Verdict};
pub use studies::run_study;
