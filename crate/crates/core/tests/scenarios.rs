use std::collections::{BTreeMap, HashSet};

use abcast_core::harness::{
    run_scenario, AckMode, ConfigError, CrashEntry, ParticipantCount, Scenario, ScenarioConfig,
};
use abcast_core::insurance::Mode;
use abcast_core::order::{decode_nodes, message_cost_model, CostMode};

fn base(scenario: Scenario, seed: u64) -> ScenarioConfig {
    ScenarioConfig {
        seed,
        duration_us: 300_000,
        scenario,
        ..Default::default()
    }
}

/// Counts every send tagged with a transaction id and checks it against the
/// closed-form cost for that transaction's participant count.
fn per_tx_send_counts(cfg: &ScenarioConfig, kinds: &[&str], cost: CostMode) {
    let out = run_scenario(cfg).unwrap();
    let sizes: BTreeMap<String, u64> = out
        .trace
        .of_kind("CLIENT_REQ")
        .map(|r| {
            (
                r.msg_id.clone(),
                decode_nodes(r.field("parts").unwrap()).unwrap().len() as u64,
            )
        })
        .collect();
    let mut sends: BTreeMap<String, u64> = BTreeMap::new();
    for r in out
        .trace
        .records()
        .iter()
        .filter(|r| kinds.contains(&r.kind.as_str()))
    {
        *sends.entry(r.msg_id.clone()).or_default() += 1;
    }
    assert!(sizes.len() > 20);
    for (tx, k) in &sizes {
        assert_eq!(
            sends.get(tx).copied().unwrap_or(0),
            message_cost_model(*k, cost),
            "{tx} with k={k}"
        );
    }
}

#[test]
fn direct_ordering_costs_k_squared_minus_one_per_transaction() {
    let mut cfg = base(Scenario::DirectGmd, 3);
    cfg.num_client_nodes = 7;
    cfg.workload.participant_count = ParticipantCount::Uniform { min: 1, max: 6 };
    per_tx_send_counts(&cfg, &["GMD_MSG", "GMD_ACK"], CostMode::Direct);
}

#[test]
fn single_server_service_costs_k_plus_two_per_transaction() {
    let mut cfg = base(Scenario::OrderService, 3);
    cfg.num_order_servers = 1;
    cfg.num_client_nodes = 7;
    cfg.workload.participant_count = ParticipantCount::Uniform { min: 1, max: 6 };
    per_tx_send_counts(
        &cfg,
        &["ORDER_REQ", "ORDER_RESP", "ORDER_FWD"],
        CostMode::Service,
    );
}

#[test]
fn crash_free_hybrid_orders_everything_by_acks() {
    for seed in 0..4 {
        let m = run_scenario(&base(Scenario::Abcast, seed)).unwrap().metrics;
        assert_eq!(m.order_violations, 0);
        assert_eq!(m.case2_count, 0);
        assert_eq!(m.delivered_total, m.broadcasts * 3);
        assert_eq!(m.deadline_bound_violations, 0);
    }
}

#[test]
fn piggybacked_acks_deliver_the_same_messages_in_order() {
    let mut cfg = base(Scenario::Abcast, 8);
    cfg.mode = Mode::GmdOnly;
    cfg.ack_mode = AckMode::Piggyback;
    let piggy = run_scenario(&cfg).unwrap().metrics;
    cfg.ack_mode = AckMode::Instant;
    let instant = run_scenario(&cfg).unwrap().metrics;
    assert_eq!(piggy.order_violations, 0);
    assert_eq!(piggy.delivered_total, instant.delivered_total);
    assert!(piggy.messages_per_tx_mean < instant.messages_per_tx_mean);
    assert!(piggy.latency_percentiles.p50_us > instant.latency_percentiles.p50_us);
}

#[test]
fn spare_takes_over_after_sequencer_crash_without_reusing_numbers() {
    let mut cfg = base(Scenario::OrderService, 4);
    cfg.duration_us = 1_500_000;
    cfg.crash_schedule = vec![CrashEntry {
        node: 2,
        at_us: 300_000,
    }];
    cfg.view_install_delay_us = 100_000;
    cfg.workload.arrival_rate_per_s = 300.0;
    let out = run_scenario(&cfg).unwrap();
    assert_eq!(out.trace.of_kind("TAKEOVER").count(), 1);
    let mut seen = HashSet::new();
    for r in out.trace.of_kind("ORDER") {
        assert!(
            seen.insert(r.field_u64("order_no").unwrap()),
            "order number reused"
        );
    }
    let jumped = out
        .trace
        .of_kind("ORDER")
        .any(|r| r.field_u64("order_no").unwrap() > cfg.order.jump_gap);
    assert!(jumped);
    let m = out.metrics;
    assert_eq!(m.anomalies, 0);
    assert!(
        m.tx_completed + m.tx_given_up >= m.tx_submitted - 5,
        "{m:?}"
    );
    assert!(m.tx_completed as f64 > 0.9 * m.tx_submitted as f64);
}

#[test]
fn service_over_abcast_survives_a_server_crash() {
    let mut cfg = base(Scenario::ServiceOverAbcast, 6);
    cfg.duration_us = 800_000;
    cfg.crash_schedule = vec![CrashEntry {
        node: 1,
        at_us: 200_000,
    }];
    cfg.workload.arrival_rate_per_s = 200.0;
    let m = run_scenario(&cfg).unwrap().metrics;
    assert_eq!(m.order_violations, 0);
    assert!(m.deadline_path_count > 0);
    assert!(m.tx_completed as f64 > 0.9 * m.tx_submitted as f64, "{m:?}");
}

#[test]
fn suspicion_mode_switches_insurance_on_after_a_crash() {
    let mut cfg = base(Scenario::Abcast, 2);
    cfg.mode = Mode::HybridOnSuspicion;
    cfg.num_order_servers = 4;
    cfg.duration_us = 600_000;
    cfg.crash_schedule = vec![CrashEntry {
        node: 3,
        at_us: 100_000,
    }];
    let m = run_scenario(&cfg).unwrap().metrics;
    assert!(m.suspicions >= 3, "{m:?}");
    assert!(m.deadline_path_count > 0);
    assert_eq!(m.order_violations, 0);
    assert!(m.blocked_interval_us < 100_000);
}

#[test]
fn unknown_config_field_is_a_parse_error() {
    let err = ScenarioConfig::from_json(r#"{"seed": 1, "sead": 2}"#).unwrap_err();
    assert!(matches!(err, ConfigError::Parse { line: 1, .. }), "{err}");
    let err = ScenarioConfig::from_json(r#"{"num_order_servers": 0}"#)
        .and_then(|c| c.validate())
        .unwrap_err();
    assert!(matches!(err, ConfigError::Invalid { .. }), "{err}");
}

#[test]
fn written_trace_reads_back_identically() {
    let out = run_scenario(&base(Scenario::Abcast, 12)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    out.write_to(dir.path()).unwrap();
    let f = std::fs::File::open(dir.path().join("trace.csv")).unwrap();
    let back = abcast_core::kernel::Trace::read_csv(std::io::BufReader::new(f)).unwrap();
    assert_eq!(back.to_csv_string(), out.trace.to_csv_string());
    let cfg = abcast_core::harness::load_config(dir.path().join("config.json")).unwrap();
    assert_eq!(cfg, out.config);
}
