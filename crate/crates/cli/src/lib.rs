//! Experiment runner, reports and inspection tools around `lamol-core`.

pub mod config;
pub mod inspect;
pub mod manifest;
pub mod metrics;
pub mod render;
pub mod runner;
