//! Front end for the `pagekv` binary: scenario configuration, the
//! `bench`/`audit`/`verify` commands and their reports.

pub mod audit;
pub mod bench;
pub mod config;
pub mod latency;
pub mod report;
pub mod verify;

pub use audit::cmd_audit;
pub use bench::cmd_bench;
pub use config::{ConfigError, Format, RunConfig, Scenario, VerifyConfig};
pub use latency::{measure_reserve_latency, LatencyProbe, LatencyStats};
pub use report::{AuditReport, Report, ScalingReport, VerifySummary};
pub use verify::{cmd_verify, fork_suite, oracle_suite, script_suite};
