//! Metrics, benchmark tables and per-epoch estimate traces.

pub mod benchmark;
pub mod metrics;
pub mod render;
pub mod trace;

pub use benchmark::{default_roster, run_benchmark, BenchmarkReport, BenchmarkRow, Bounds, RosterEntry};
pub use metrics::{ols_baseline, r_squared, relative_r2};
pub use trace::{epoch_trace, EpochTrace, TracePoint};
