//! Scenario harness: configuration, execution, trace oracles and sweeps.

pub mod config;
pub mod metrics;
pub mod oracle;
pub mod run;
pub mod sweep;

pub use config::{
    load_config, AckMode, ConfigError, CrashEntry, ParticipantCount, Scenario, ScenarioConfig,
};
pub use metrics::{LatencyPercentiles, RunMetrics};
pub use oracle::{check_total_order, OracleError, TraceView};
pub use run::{run_scenario, Body, RunError, RunOutput};
pub use sweep::{apply_axis, run_sweep, sweep_csv, write_sweep_csv, SweepError, SweepRow};
