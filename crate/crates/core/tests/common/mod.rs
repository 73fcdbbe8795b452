//! Property checks shared by the proptest battery and the acceptance runner.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use abcast_core::delay::{compute_bound, DelayBoundConfig, DelayDistribution, DelaySample};
use abcast_core::gmd::{GmdAck, GmdMessage, GmdNodeState};
use abcast_core::harness::{run_scenario, ScenarioConfig};
use abcast_core::insurance::Mode;
use abcast_core::{MsgId, NodeId};
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;

pub fn small_run_strategy() -> impl Strategy<Value = ScenarioConfig> {
    (any::<u64>(), 0usize..3, 200.0f64..2000.0, 3u32..6).prop_map(|(seed, m, rate, n)| {
        let mut c = ScenarioConfig {
            seed,
            duration_us: 120_000,
            num_order_servers: n,
            mode: [Mode::GmdOnly, Mode::Hybrid, Mode::HybridOnSuspicion][m],
            ..Default::default()
        };
        c.workload.arrival_rate_per_s = rate;
        c.workload.drain_us = 40_000;
        c
    })
}

/// Same config, same seed: byte-identical trace.
pub fn check_determinism(cfg: &ScenarioConfig) -> Result<(), TestCaseError> {
    let a = run_scenario(cfg).map_err(|e| TestCaseError::fail(e.to_string()))?;
    let b = run_scenario(cfg).map_err(|e| TestCaseError::fail(e.to_string()))?;
    prop_assert_eq!(a.trace.to_csv_string(), b.trace.to_csv_string());
    prop_assert_eq!(a.metrics, b.metrics);
    Ok(())
}

/// Window of 1..=100 positive delays and a quantile expressed in 1/10000ths.
pub fn window_strategy() -> impl Strategy<Value = (Vec<u64>, u64)> {
    (
        prop::collection::vec(1u64..1_000_000, 1..=100),
        1u64..=10_000,
    )
}

/// The estimator's nearest-rank quantile equals sort-and-index.
pub fn check_quantile_oracle(window: &[u64], q_ten_thousandths: u64) -> Result<(), TestCaseError> {
    let mut dist = DelayDistribution::new(100);
    for &d in window {
        dist.observe(DelaySample {
            from: NodeId(1),
            to: NodeId(0),
            observed_delay_us: d as i64,
        })
        .map_err(|e| TestCaseError::fail(e.to_string()))?;
    }
    let mut sorted = window.to_vec();
    sorted.sort_unstable();
    let n = sorted.len() as u64;
    let rank = (q_ten_thousandths * n).div_ceil(10_000).clamp(1, n);
    let expected = sorted[(rank - 1) as usize];
    let got = dist
        .quantile(q_ten_thousandths as f64 / 10_000.0)
        .map_err(|e| TestCaseError::fail(e.to_string()))?;
    prop_assert_eq!(got, expected);
    Ok(())
}

pub fn bound_strategy() -> impl Strategy<Value = ([u64; 4], usize, u64)> {
    (
        [1u64..1_000_000, 0u64..100_000, 0u64..100_000, 0u64..100_000],
        0usize..4,
        0u64..100_000,
    )
}

/// Raising any one of d, eta, theta, margin never lowers D.
pub fn check_bound_monotone(base: [u64; 4], which: usize, bump: u64) -> Result<(), TestCaseError> {
    let eval = |v: [u64; 4]| {
        let cfg = DelayBoundConfig {
            percentile: 0.9999,
            eta_us: v[1],
            theta_us: v[2],
            epsilon_us: 0,
            safety_margin_us: v[3],
        };
        compute_bound(v[0], &cfg).expect("d is positive")
    };
    let mut raised = base;
    raised[which] += bump;
    prop_assert!(eval(raised) >= eval(base));
    Ok(())
}

#[derive(Debug, Clone)]
pub enum Step {
    Broadcast(usize),
    Deliver(usize),
    Tick(usize, u64),
}

pub fn schedule_strategy() -> impl Strategy<Value = (usize, Vec<Step>, u64)> {
    (3usize..6).prop_flat_map(|n| {
        let step = prop_oneof![
            2 => (0..n).prop_map(Step::Broadcast),
            6 => any::<prop::sample::Index>().prop_map(|i| Step::Deliver(i.index(usize::MAX))),
            2 => (0..n, 1u64..500).prop_map(|(i, t)| Step::Tick(i, t)),
        ];
        (Just(n), prop::collection::vec(step, 1..120), any::<u64>())
    })
}

#[derive(Debug, Clone)]
enum Packet {
    Msg(usize, GmdMessage<()>),
    Ack(usize, GmdAck),
}

pub struct GmdWorld {
    pub nodes: Vec<GmdNodeState<()>>,
    clocks: Vec<u64>,
    in_flight: Vec<Packet>,
    /// Per acker: promises made so far, in order.
    pub promises: Vec<Vec<u64>>,
    /// Per sender: timestamps broadcast, paired with the promise count at the time.
    pub broadcasts: Vec<Vec<(u64, usize)>>,
    /// When set, every packet is handled twice and replayed again at the end.
    duplicate: bool,
    replayed: Vec<Packet>,
}

impl GmdWorld {
    pub fn new(n: usize, duplicate: bool) -> Self {
        let members: Vec<NodeId> = (0..n as u32).map(NodeId).collect();
        Self {
            nodes: members
                .iter()
                .map(|&m| GmdNodeState::new(m, members.iter().copied()))
                .collect(),
            clocks: (0..n as u64).map(|i| 1_000 + 37 * i).collect(),
            in_flight: Vec::new(),
            promises: vec![Vec::new(); n],
            broadcasts: vec![Vec::new(); n],
            duplicate,
            replayed: Vec::new(),
        }
    }

    fn emit_ack(&mut self, ack: GmdAck) {
        self.promises[ack.acker.0 as usize].push(ack.acker_ts);
        for to in 0..self.nodes.len() {
            self.in_flight.push(Packet::Ack(to, ack.clone()));
        }
    }

    fn broadcast(&mut self, i: usize) {
        let m = self.nodes[i].broadcast(self.clocks[i], ());
        self.broadcasts[i].push((m.ts, self.promises[i].len()));
        for to in 0..self.nodes.len() {
            if to != i {
                self.in_flight.push(Packet::Msg(to, m.clone()));
            }
        }
        if let Some(a) = self.nodes[i].on_receive(m, self.clocks[i]) {
            self.emit_ack(a);
        }
        self.nodes[i].try_deliver();
    }

    fn deliver(&mut self, idx: usize) {
        if self.in_flight.is_empty() {
            return;
        }
        let p = self.in_flight.swap_remove(idx % self.in_flight.len());
        if self.duplicate {
            self.handle(p.clone());
            self.replayed.push(p.clone());
        }
        self.handle(p);
    }

    fn handle(&mut self, p: Packet) {
        match p {
            Packet::Msg(to, m) => {
                if let Some(a) = self.nodes[to].on_receive(m, self.clocks[to]) {
                    self.emit_ack(a);
                }
                self.nodes[to].try_deliver();
            }
            Packet::Ack(to, a) => {
                self.nodes[to].on_ack(&a);
                self.nodes[to].try_deliver();
            }
        }
    }

    pub fn run(&mut self, steps: &[Step], flush_seed: u64) {
        for s in steps {
            match *s {
                Step::Broadcast(i) => self.broadcast(i),
                Step::Deliver(k) => self.deliver(k),
                Step::Tick(i, t) => self.clocks[i] += t,
            }
        }
        let mut x = flush_seed | 1;
        while !self.in_flight.is_empty() {
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            self.deliver(x as usize);
        }
        for p in std::mem::take(&mut self.replayed) {
            self.handle(p);
        }
    }

    pub fn delivered(&self) -> Vec<Vec<MsgId>> {
        self.nodes.iter().map(|n| n.delivered().to_vec()).collect()
    }
}

/// Every promise is honored by later broadcasts, and all nodes deliver the
/// same sequence in timestamp order once all traffic has arrived.
pub fn check_promise_invariant(
    n: usize,
    steps: &[Step],
    flush_seed: u64,
) -> Result<(), TestCaseError> {
    let mut w = GmdWorld::new(n, false);
    w.run(steps, flush_seed);
    for i in 0..n {
        for &(ts, made) in &w.broadcasts[i] {
            for &p in &w.promises[i][..made] {
                prop_assert!(
                    ts > p,
                    "node {} broadcast ts {} after promising {}",
                    i,
                    ts,
                    p
                );
            }
        }
    }
    let total: usize = w.broadcasts.iter().map(Vec::len).sum();
    let d = w.delivered();
    for seq in &d {
        prop_assert_eq!(seq.len(), total);
        prop_assert_eq!(seq, &d[0]);
    }
    let ts_of: BTreeMap<MsgId, u64> = w
        .broadcasts
        .iter()
        .enumerate()
        .flat_map(|(i, v)| {
            v.iter()
                .enumerate()
                .map(move |(q, &(ts, _))| (MsgId::new(NodeId(i as u32), q as u64 + 1), ts))
        })
        .collect();
    let keys: Vec<(u64, NodeId)> = d[0].iter().map(|m| (ts_of[m], m.sender)).collect();
    prop_assert!(keys.windows(2).all(|w| w[0] < w[1]));
    Ok(())
}

/// Handling every packet twice, and replaying all of them late, changes
/// nothing that is delivered.
pub fn check_duplication_idempotent(
    n: usize,
    steps: &[Step],
    flush_seed: u64,
) -> Result<(), TestCaseError> {
    let mut once = GmdWorld::new(n, false);
    once.run(steps, flush_seed);
    let mut twice = GmdWorld::new(n, true);
    twice.run(steps, flush_seed);
    let a = once.delivered();
    let b = twice.delivered();
    for (x, y) in a.iter().zip(&b) {
        let xs: BTreeSet<_> = x.iter().collect();
        prop_assert_eq!(x.len(), xs.len());
        prop_assert_eq!(x, y);
    }
    Ok(())
}
