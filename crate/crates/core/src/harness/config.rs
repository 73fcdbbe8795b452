//! Scenario configuration: a strict JSON document with documented defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::insurance::Mode;
use crate::kernel::NetworkModel;
use crate::order::{AdmissionConfig, RetryPolicy, DEFAULT_HISTORY_DEPTH};
use crate::{Micros, SimTime};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}, column {column}: {msg}")]
    Parse {
        line: usize,
        column: usize,
        msg: String,
    },
    #[error("invalid `{field}`: {msg}")]
    Invalid { field: String, msg: String },
}

impl ConfigError {
    pub fn invalid(field: &str, msg: impl Into<String>) -> Self {
        ConfigError::Invalid {
            field: field.to_string(),
            msg: msg.into(),
        }
    }
}

impl From<serde_json::Error> for ConfigError {
    fn from(e: serde_json::Error) -> Self {
        let text = e.to_string();
        let msg = match text.rsplit_once(" at line ") {
            Some((head, _)) => head.to_string(),
            None => text,
        };
        ConfigError::Parse {
            line: e.line(),
            column: e.column(),
            msg,
        }
    }
}

/// What a run simulates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// The server group broadcasts a Poisson stream of messages.
    Abcast,
    /// Clients order transactions through an active sequencer with spares.
    OrderService,
    /// Each transaction host runs an all-ack broadcast among its participants.
    DirectGmd,
    /// Every server takes requests and orders them by abcast among servers.
    ServiceOverAbcast,
}

impl Scenario {
    pub fn as_str(&self) -> &'static str {
        match self {
            Scenario::Abcast => "abcast",
            Scenario::OrderService => "order_service",
            Scenario::DirectGmd => "direct_gmd",
            Scenario::ServiceOverAbcast => "service_over_abcast",
        }
    }

    pub fn uses_clients(&self) -> bool {
        !matches!(self, Scenario::Abcast)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AckMode {
    /// Acks are broadcast as soon as a message is received.
    Instant,
    /// Acks wait for the node's next broadcast or the flush timer.
    Piggyback,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrashEntry {
    pub node: u32,
    pub at_us: SimTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParticipantCount {
    Fixed(u32),
    Uniform { min: u32, max: u32 },
}

impl ParticipantCount {
    pub fn max(&self) -> u32 {
        match *self {
            ParticipantCount::Fixed(k) => k,
            ParticipantCount::Uniform { max, .. } => max,
        }
    }

    pub fn min(&self) -> u32 {
        match *self {
            ParticipantCount::Fixed(k) => k,
            ParticipantCount::Uniform { min, .. } => min,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Workload {
    /// Poisson arrival rate over the whole system.
    pub arrival_rate_per_s: f64,
    pub participant_count: ParticipantCount,
    /// Arrivals stop this long before the end so in-flight work can settle.
    pub drain_us: Micros,
}

impl Default for Workload {
    fn default() -> Self {
        Self {
            arrival_rate_per_s: 500.0,
            participant_count: ParticipantCount::Fixed(3),
            drain_us: 100_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClockConfig {
    /// Initial offsets are drawn uniformly from `[-max_offset_us, max_offset_us]`.
    pub max_offset_us: Micros,
    pub max_drift_ppm: u64,
    pub sync_max_attempts: u32,
}

impl Default for ClockConfig {
    fn default() -> Self {
        Self {
            max_offset_us: 5_000,
            max_drift_ppm: 50,
            sync_max_attempts: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OrderConfig {
    /// Time the active sequencer spends on one request; requests queue.
    pub service_time_us: Micros,
    /// Order numbers skipped by a spare taking over.
    pub jump_gap: u64,
    pub retry: RetryPolicy,
}

impl Default for OrderConfig {
    fn default() -> Self {
        Self {
            service_time_us: 100,
            jump_gap: 1_000,
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub duration_us: SimTime,
    pub scenario: Scenario,
    pub num_order_servers: u32,
    pub num_client_nodes: u32,
    pub mode: Mode,
    pub ack_mode: AckMode,
    /// Flush period for piggybacked acks.
    pub ack_flush_us: Micros,
    pub network: NetworkModel,
    pub crash_schedule: Vec<CrashEntry>,
    pub eta_us: Micros,
    /// Relay timeout; `null` means the 99th percentile of the configured
    /// delay distribution.
    pub theta_us: Option<Micros>,
    pub epsilon_us: Micros,
    pub percentile: f64,
    pub safety_margin_us: Micros,
    pub window_size: usize,
    pub history_depth: usize,
    /// Token bucket at the sequencer; `null` disables admission control.
    pub admission: Option<AdmissionConfig>,
    pub workload: Workload,
    pub view_install_delay_us: Micros,
    pub resync_interval_us: Micros,
    pub heartbeat_interval_us: Micros,
    pub suspicion_timeout_us: Micros,
    pub clocks: ClockConfig,
    pub order: OrderConfig,
    /// Record every successful send in the trace (drops are always recorded).
    pub trace_sends: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            duration_us: 1_000_000,
            scenario: Scenario::Abcast,
            num_order_servers: 3,
            num_client_nodes: 4,
            mode: Mode::Hybrid,
            ack_mode: AckMode::Instant,
            ack_flush_us: 1_000,
            network: NetworkModel::default(),
            crash_schedule: Vec::new(),
            eta_us: 2_000,
            theta_us: None,
            epsilon_us: 1_000,
            percentile: crate::delay::DEFAULT_PERCENTILE,
            safety_margin_us: 0,
            window_size: crate::delay::DEFAULT_WINDOW,
            history_depth: DEFAULT_HISTORY_DEPTH,
            admission: None,
            workload: Workload::default(),
            view_install_delay_us: 10_000_000,
            resync_interval_us: 10_000_000,
            heartbeat_interval_us: 5_000,
            suspicion_timeout_us: 20_000,
            clocks: ClockConfig::default(),
            order: OrderConfig::default(),
            trace_sends: true,
        }
    }
}

impl ScenarioConfig {
    /// Parses and validates a JSON document.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn total_nodes(&self) -> u32 {
        if self.scenario.uses_clients() {
            self.num_order_servers + self.num_client_nodes
        } else {
            self.num_order_servers
        }
    }

    /// Relay timeout in force.
    pub fn theta(&self) -> Micros {
        self.theta_us
            .unwrap_or_else(|| self.network.delay.quantile(0.99))
    }

    /// Worst-case one-way delay assumed before any traffic is observed:
    /// the configured distribution's quantile at `percentile`, plus epsilon.
    pub fn prior_d(&self) -> Micros {
        self.network.delay.quantile(self.percentile) + self.epsilon_us
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("duration_us", self.duration_us),
            ("view_install_delay_us", self.view_install_delay_us),
            ("resync_interval_us", self.resync_interval_us),
            ("heartbeat_interval_us", self.heartbeat_interval_us),
            ("suspicion_timeout_us", self.suspicion_timeout_us),
            ("ack_flush_us", self.ack_flush_us),
            (
                "order.retry.request_timeout_us",
                self.order.retry.request_timeout_us,
            ),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(ConfigError::invalid(field, "must be positive"));
            }
        }
        if self.theta_us == Some(0) {
            return Err(ConfigError::invalid("theta_us", "must be positive"));
        }
        if !(self.percentile > 0.0 && self.percentile < 1.0) {
            return Err(ConfigError::invalid(
                "percentile",
                format!("{} is outside (0,1)", self.percentile),
            ));
        }
        if self.num_order_servers == 0 {
            return Err(ConfigError::invalid(
                "num_order_servers",
                "must be at least 1",
            ));
        }
        if self.window_size == 0 {
            return Err(ConfigError::invalid("window_size", "must be positive"));
        }
        if self.history_depth == 0 {
            return Err(ConfigError::invalid("history_depth", "must be positive"));
        }
        self.network
            .validate()
            .map_err(|m| ConfigError::invalid("network", m))?;
        let w = &self.workload;
        if !(w.arrival_rate_per_s.is_finite() && w.arrival_rate_per_s >= 0.0) {
            return Err(ConfigError::invalid(
                "workload.arrival_rate_per_s",
                "must be a non-negative number",
            ));
        }
        if w.drain_us >= self.duration_us {
            return Err(ConfigError::invalid(
                "workload.drain_us",
                "must be below duration_us",
            ));
        }
        if self.scenario.uses_clients() {
            let pc = w.participant_count;
            if pc.min() == 0 || pc.min() > pc.max() {
                return Err(ConfigError::invalid(
                    "workload.participant_count",
                    "needs 1 <= min <= max",
                ));
            }
            if pc.max() > self.num_client_nodes {
                return Err(ConfigError::invalid(
                    "workload.participant_count",
                    format!("exceeds num_client_nodes ({})", self.num_client_nodes),
                ));
            }
        }
        for c in &self.crash_schedule {
            if c.node >= self.total_nodes() {
                return Err(ConfigError::invalid(
                    "crash_schedule",
                    format!("node {} does not exist", c.node),
                ));
            }
        }
        Ok(())
    }
}

/// Reads, parses and validates a config file.
pub fn load_config(path: impl AsRef<Path>) -> Result<ScenarioConfig, ConfigError> {
    let text = std::fs::read_to_string(path)?;
    ScenarioConfig::from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_gets_defaults() {
        let cfg = ScenarioConfig::from_json(r#"{"seed": 1, "duration_us": 1000000}"#).unwrap();
        assert_eq!(cfg.seed, 1);
        assert_eq!(cfg.num_order_servers, 3);
        assert_eq!(cfg.view_install_delay_us, 10_000_000);
        assert_eq!(cfg.percentile, 0.9999);
        assert_eq!(cfg.mode, Mode::Hybrid);
    }

    #[test]
    fn out_of_range_percentile_names_field() {
        let err = ScenarioConfig::from_json(r#"{"seed": 1, "percentile": 1.5}"#).unwrap_err();
        match err {
            ConfigError::Invalid { field, .. } => assert_eq!(field, "percentile"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn unknown_field_is_a_parse_error() {
        let err = ScenarioConfig::from_json("{\n  \"seed\": 1,\n  \"sede\": 2\n}").unwrap_err();
        match err {
            ConfigError::Parse { line, msg, .. } => {
                assert_eq!(line, 3);
                assert!(msg.contains("sede"));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn nested_config_round_trips() {
        let cfg = ScenarioConfig {
            admission: Some(AdmissionConfig {
                rate_per_s: 10,
                burst: 2,
            }),
            crash_schedule: vec![CrashEntry { node: 1, at_us: 5 }],
            ..ScenarioConfig::default()
        };
        assert_eq!(ScenarioConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn theta_defaults_to_p99_delay() {
        let cfg = ScenarioConfig {
            network: NetworkModel::fixed(700),
            ..ScenarioConfig::default()
        };
        assert_eq!(cfg.theta(), 700);
        assert_eq!(cfg.prior_d(), 1_700);
    }
}
