//! Answer metrics, greedy-decoding evaluation, and score summaries.

mod matrix;
mod metrics;
mod scoring;

pub use matrix::{summarize, summarize_orders, CheckpointId, OrderSummary, ScoreMatrix, Summary};
pub use metrics::{exact_match, normalized_f1, Metric};
pub use scoring::{evaluate_task, predict};
