//! Determinism audits for repeated simulation runs.

pub mod trace;
pub mod metrics;
pub mod minisim;
pub mod loadgen;
pub mod orchestrate;
pub mod report;
pub mod selftest;
pub(crate) mod u64_string;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
