//! Command-line pipeline: corpus synthesis, base training, causal tracing, stamp
//! editing, evaluation and sweeps.

pub mod commands;
pub mod config;
pub mod plot;

pub use commands::{demo, DemoOutcome, DemoSummary, Scores, SweepKind, SweepRow};
pub use config::{RunConfig, SweepConfig};
