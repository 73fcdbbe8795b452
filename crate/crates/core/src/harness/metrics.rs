//! Run metrics, written as `metrics.json` and as one `sweep.csv` row.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencyPercentiles {
    pub p50_us: u64,
    pub p99_us: u64,
    pub p999_us: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub scenario: String,
    pub mode: String,
    pub seed: u64,
    /// Abcast deliveries at nodes that never crashed.
    pub delivered_total: u64,
    pub case1_count: u64,
    pub case2_count: u64,
    pub gmd_path_count: u64,
    pub deadline_path_count: u64,
    pub order_violations: u64,
    /// Broadcast-to-delivery latency for abcast runs; submission to last
    /// execution for transaction runs.
    pub latency_percentiles: LatencyPercentiles,
    pub messages_per_tx_mean: f64,
    pub rejected_requests: u64,
    pub blocked_interval_us: u64,

    pub broadcasts: u64,
    pub undelivered_pairs: u64,
    pub case2_rate: f64,
    /// Non-Case-2 order violations: pairs where neither message took part
    /// in a Case-2 pair.
    pub unexplained_violations: u64,
    pub nominal_d_us: u64,
    pub nominal_bound_us: u64,
    pub theta_us: u64,
    pub max_bound_us: u64,
    pub deadline_checked: u64,
    pub deadline_bound_violations: u64,
    pub postponed_gap: u64,
    pub postponed_order: u64,
    pub postponed_late_arrival: u64,
    pub postponed_resync: u64,
    pub executed_total: u64,
    pub tx_submitted: u64,
    pub tx_completed: u64,
    pub tx_given_up: u64,
    pub no_server_errors: u64,
    pub order_requests: u64,
    pub reject_fraction: f64,
    pub server_queue_max: u64,
    pub server_queue_delay_mean_us: f64,
    pub protocol_messages: u64,
    pub replication_messages: u64,
    pub suspicions: u64,
    pub sync_failures: u64,
    pub anomalies: u64,
    pub events_processed: u64,
}

impl RunMetrics {
    /// Column names of [`Self::csv_row`].
    pub fn csv_header() -> Vec<&'static str> {
        vec![
            "scenario",
            "mode",
            "seed",
            "delivered_total",
            "case1_count",
            "case2_count",
            "gmd_path_count",
            "deadline_path_count",
            "order_violations",
            "latency_p50_us",
            "latency_p99_us",
            "latency_p999_us",
            "messages_per_tx_mean",
            "rejected_requests",
            "blocked_interval_us",
            "broadcasts",
            "case2_rate",
            "unexplained_violations",
            "nominal_d_us",
            "D_us",
            "max_bound_us",
            "deadline_bound_violations",
            "executed_total",
            "tx_completed",
            "order_requests",
            "reject_fraction",
            "server_queue_max",
            "server_queue_delay_mean_us",
            "protocol_messages",
        ]
    }

    pub fn csv_row(&self) -> Vec<String> {
        let l = &self.latency_percentiles;
        vec![
            self.scenario.clone(),
            self.mode.clone(),
            self.seed.to_string(),
            self.delivered_total.to_string(),
            self.case1_count.to_string(),
            self.case2_count.to_string(),
            self.gmd_path_count.to_string(),
            self.deadline_path_count.to_string(),
            self.order_violations.to_string(),
            l.p50_us.to_string(),
            l.p99_us.to_string(),
            l.p999_us.to_string(),
            format!("{:.4}", self.messages_per_tx_mean),
            self.rejected_requests.to_string(),
            self.blocked_interval_us.to_string(),
            self.broadcasts.to_string(),
            format!("{:.3e}", self.case2_rate),
            self.unexplained_violations.to_string(),
            self.nominal_d_us.to_string(),
            self.nominal_bound_us.to_string(),
            self.max_bound_us.to_string(),
            self.deadline_bound_violations.to_string(),
            self.executed_total.to_string(),
            self.tx_completed.to_string(),
            self.order_requests.to_string(),
            format!("{:.4}", self.reject_fraction),
            self.server_queue_max.to_string(),
            format!("{:.1}", self.server_queue_delay_mean_us),
            self.protocol_messages.to_string(),
        ]
    }
}
