//! Ground-truth checks computed from a trace alone.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use serde::Serialize;
use thiserror::Error;

use crate::insurance::{DeliveryPath, EVENT_STEP_US};
use crate::kernel::trace::kinds;
use crate::kernel::{Trace, TraceRecord};
use crate::{NodeId, SimTime, Timestamp};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OracleError {
    #[error("incomplete trace: {0}")]
    IncompleteTrace(String),
}

/// One delivery as recorded in the trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeliveryRecord {
    pub index: usize,
    pub time: SimTime,
    pub node: NodeId,
    pub msg: String,
    pub ts: Timestamp,
    pub path: DeliveryPath,
    pub clock: Option<u64>,
    pub deadline: Option<u64>,
    pub bound: Option<u64>,
    pub late: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BroadcastRecord {
    pub index: usize,
    pub time: SimTime,
    pub node: NodeId,
    pub ts: Timestamp,
}

/// Delivery-related content of a trace, indexed for the oracles.
#[derive(Debug, Clone, Default)]
pub struct TraceView {
    pub broadcasts: HashMap<String, BroadcastRecord>,
    pub deliveries: BTreeMap<NodeId, Vec<DeliveryRecord>>,
    /// First record index at which a node knew of a message.
    pub first_known: HashMap<(String, NodeId), usize>,
    pub crashes: BTreeMap<NodeId, SimTime>,
    /// Nodes that took part in the broadcast group.
    pub members: BTreeSet<NodeId>,
    pub end: SimTime,
}

fn need<'a>(r: &'a TraceRecord, key: &str) -> Result<&'a str, OracleError> {
    r.field(key).ok_or_else(|| {
        OracleError::IncompleteTrace(format!(
            "{} record of {} at {} lacks `{key}`",
            r.kind, r.msg_id, r.time
        ))
    })
}

fn need_u64(r: &TraceRecord, key: &str) -> Result<u64, OracleError> {
    need(r, key)?.parse().map_err(|_| {
        OracleError::IncompleteTrace(format!(
            "{} record of {} has a bad `{key}`",
            r.kind, r.msg_id
        ))
    })
}

impl TraceView {
    pub fn parse(trace: &Trace) -> Result<Self, OracleError> {
        let mut v = TraceView::default();
        let mut ended = false;
        for (index, r) in trace.records().iter().enumerate() {
            match r.kind.as_str() {
                kinds::BCAST => {
                    v.members.insert(r.node);
                    v.broadcasts.insert(
                        r.msg_id.clone(),
                        BroadcastRecord {
                            index,
                            time: r.time,
                            node: r.node,
                            ts: need_u64(r, "ts")?,
                        },
                    );
                }
                kinds::KNOW => {
                    v.members.insert(r.node);
                    v.first_known
                        .entry((r.msg_id.clone(), r.node))
                        .or_insert(index);
                }
                kinds::DELIVER => {
                    v.members.insert(r.node);
                    let path = DeliveryPath::parse(need(r, "path")?).ok_or_else(|| {
                        OracleError::IncompleteTrace(format!("unknown path on {}", r.msg_id))
                    })?;
                    v.first_known
                        .entry((r.msg_id.clone(), r.node))
                        .or_insert(index);
                    v.deliveries
                        .entry(r.node)
                        .or_default()
                        .push(DeliveryRecord {
                            index,
                            time: r.time,
                            node: r.node,
                            msg: r.msg_id.clone(),
                            ts: need_u64(r, "ts")?,
                            path,
                            clock: r.field_u64("clock"),
                            deadline: r.field_u64("deadline"),
                            bound: r.field_u64("D"),
                            late: r.field("late").unwrap_or("none").to_string(),
                        });
                }
                kinds::CRASH => {
                    v.crashes.entry(r.node).or_insert(r.time);
                }
                kinds::END => {
                    ended = true;
                    v.end = r.time;
                }
                _ => {}
            }
        }
        if !ended {
            return Err(OracleError::IncompleteTrace("no END record".into()));
        }
        for ds in v.deliveries.values() {
            for d in ds {
                if !v.broadcasts.contains_key(&d.msg) {
                    return Err(OracleError::IncompleteTrace(format!(
                        "{} delivered at node {} without a BCAST record",
                        d.msg, d.node
                    )));
                }
            }
        }
        Ok(v)
    }

    /// Group members that never crashed.
    pub fn operative(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.members
            .iter()
            .copied()
            .filter(|n| !self.crashes.contains_key(n))
    }

    pub fn first_crash(&self) -> Option<SimTime> {
        self.crashes.values().copied().min()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum ViolationKind {
    /// Two nodes delivered the pair in opposite orders.
    CrossNode { a: NodeId, b: NodeId },
    /// One node delivered `first` before `second` although `second` has the
    /// smaller timestamp.
    IntraNode { node: NodeId },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub first: String,
    pub second: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.kind {
            ViolationKind::CrossNode { a, b } => {
                write!(
                    f,
                    "nodes {a} and {b} disagree on {} vs {}",
                    self.first, self.second
                )
            }
            ViolationKind::IntraNode { node } => {
                write!(
                    f,
                    "node {node} delivered {} before smaller-timestamp {}",
                    self.first, self.second
                )
            }
        }
    }
}

impl Violation {
    pub fn involves(&self, msg: &str) -> bool {
        self.first == msg || self.second == msg
    }
}

/// Every pair of messages delivered in opposite relative order at two
/// nodes (reported once per pair), plus every delivery at a node of a
/// message with a smaller timestamp than one it delivered earlier.
pub fn check_total_order(trace: &Trace) -> Result<Vec<Violation>, OracleError> {
    Ok(total_order_violations(&TraceView::parse(trace)?))
}

pub fn total_order_violations(view: &TraceView) -> Vec<Violation> {
    let mut out = Vec::new();
    let nodes: Vec<_> = view.deliveries.keys().copied().collect();
    let mut reported: HashSet<(String, String)> = HashSet::new();
    for (i, &a) in nodes.iter().enumerate() {
        for &b in &nodes[i + 1..] {
            let pos_b: HashMap<&str, usize> = view.deliveries[&b]
                .iter()
                .enumerate()
                .map(|(p, d)| (d.msg.as_str(), p))
                .collect();
            let mut seen: BTreeMap<usize, &str> = BTreeMap::new();
            for d in &view.deliveries[&a] {
                let Some(&p) = pos_b.get(d.msg.as_str()) else {
                    continue;
                };
                for (_, &earlier) in seen.range(p + 1..) {
                    let key = if earlier < d.msg.as_str() {
                        (earlier.to_string(), d.msg.clone())
                    } else {
                        (d.msg.clone(), earlier.to_string())
                    };
                    if reported.insert(key) {
                        out.push(Violation {
                            kind: ViolationKind::CrossNode { a, b },
                            first: earlier.to_string(),
                            second: d.msg.clone(),
                        });
                    }
                }
                seen.insert(p, d.msg.as_str());
            }
        }
    }
    for (&node, ds) in &view.deliveries {
        let mut seen: BTreeMap<(Timestamp, usize), &str> = BTreeMap::new();
        for (i, d) in ds.iter().enumerate() {
            for (_, &earlier) in seen.range((d.ts + 1, 0)..) {
                out.push(Violation {
                    kind: ViolationKind::IntraNode { node },
                    first: earlier.to_string(),
                    second: d.msg.clone(),
                });
            }
            seen.insert((d.ts, i), d.msg.as_str());
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CaseClass {
    /// Delivered by the all-ack rule.
    GmdOrdered,
    /// Known before any later-stamped message was ordered by deadline.
    Case1,
    /// A later-stamped message was ordered by deadline before the node
    /// knew of this one.
    Case2,
    /// Neither delivered nor overtaken (e.g. still pending at the end).
    Undelivered,
}

/// Per-node prefix maxima of deadline-delivered timestamps by trace index.
struct DeadlineIndex {
    indices: Vec<usize>,
    prefix_max: Vec<Timestamp>,
}

impl DeadlineIndex {
    fn new(ds: &[DeliveryRecord]) -> Self {
        let mut indices = Vec::new();
        let mut prefix_max = Vec::new();
        let mut m = 0;
        for d in ds.iter().filter(|d| d.path == DeliveryPath::Deadline) {
            m = m.max(d.ts);
            indices.push(d.index);
            prefix_max.push(m);
        }
        Self {
            indices,
            prefix_max,
        }
    }

    /// Largest deadline-delivered timestamp strictly before trace index `idx`.
    fn max_before(&self, idx: usize) -> Option<Timestamp> {
        let n = self.indices.partition_point(|&i| i < idx);
        n.checked_sub(1).map(|k| self.prefix_max[k])
    }
}

fn classify_with(
    view: &TraceView,
    idx: &DeadlineIndex,
    msg: &str,
    node: NodeId,
) -> Option<CaseClass> {
    let b = view.broadcasts.get(msg)?;
    let delivered = view
        .deliveries
        .get(&node)
        .and_then(|ds| ds.iter().find(|d| d.msg == msg));
    if delivered.is_some_and(|d| d.path == DeliveryPath::Gmd) {
        return Some(CaseClass::GmdOrdered);
    }
    let known = view
        .first_known
        .get(&(msg.to_string(), node))
        .copied()
        .unwrap_or(usize::MAX);
    if idx.max_before(known).is_some_and(|t| t > b.ts) {
        return Some(CaseClass::Case2);
    }
    Some(if delivered.is_some() {
        CaseClass::Case1
    } else {
        CaseClass::Undelivered
    })
}

/// Classifies one (message, node) pair; `None` for an unknown message.
pub fn classify_case(view: &TraceView, msg: &str, node: NodeId) -> Option<CaseClass> {
    let empty = Vec::new();
    let idx = DeadlineIndex::new(view.deliveries.get(&node).unwrap_or(&empty));
    classify_with(view, &idx, msg, node)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CaseStats {
    pub pairs: u64,
    pub gmd_ordered: u64,
    pub case1: u64,
    pub case2: u64,
    pub undelivered: u64,
    pub case1_rate: f64,
    pub case2_rate: f64,
    pub gmd_path_count: u64,
    pub deadline_path_count: u64,
    pub case2_by_node: BTreeMap<NodeId, u64>,
    /// Messages involved in at least one Case-2 pair.
    #[serde(skip)]
    pub case2_msgs: BTreeSet<String>,
}

/// Aggregates [`classify_case`] over every (message, operative node) pair.
/// Rates are relative to the classified pairs (undelivered ones excluded).
pub fn case_statistics(trace: &Trace) -> Result<CaseStats, OracleError> {
    Ok(case_statistics_of(&TraceView::parse(trace)?))
}

pub fn case_statistics_of(view: &TraceView) -> CaseStats {
    let mut s = CaseStats::default();
    let empty = Vec::new();
    let mut msgs: Vec<&String> = view.broadcasts.keys().collect();
    msgs.sort();
    for node in view.operative() {
        let ds = view.deliveries.get(&node).unwrap_or(&empty);
        for d in ds {
            match d.path {
                DeliveryPath::Gmd => s.gmd_path_count += 1,
                DeliveryPath::Deadline => s.deadline_path_count += 1,
            }
        }
        let idx = DeadlineIndex::new(ds);
        for &m in &msgs {
            match classify_with(view, &idx, m, node) {
                Some(CaseClass::GmdOrdered) => s.gmd_ordered += 1,
                Some(CaseClass::Case1) => s.case1 += 1,
                Some(CaseClass::Case2) => {
                    s.case2 += 1;
                    *s.case2_by_node.entry(node).or_default() += 1;
                    s.case2_msgs.insert(m.clone());
                }
                Some(CaseClass::Undelivered) | None => s.undelivered += 1,
            }
        }
    }
    s.pairs = s.gmd_ordered + s.case1 + s.case2;
    if s.pairs > 0 {
        s.case1_rate = s.case1 as f64 / s.pairs as f64;
        s.case2_rate = s.case2 as f64 / s.pairs as f64;
    }
    s
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct DeadlineCheck {
    pub checked: u64,
    /// On-time deliveries outside `[deadline, deadline + one event step]`.
    pub violations: u64,
    pub postponed_gap: u64,
    pub postponed_order: u64,
    pub postponed_late_arrival: u64,
    pub postponed_resync: u64,
}

/// Checks every deadline delivery: the local clock must lie within one
/// event step of the deadline unless the delivery is tagged as postponed.
pub fn check_deadline_bound(view: &TraceView) -> DeadlineCheck {
    let mut c = DeadlineCheck::default();
    for d in view.deliveries.values().flatten() {
        if d.path != DeliveryPath::Deadline {
            continue;
        }
        c.checked += 1;
        let (Some(clock), Some(deadline)) = (d.clock, d.deadline) else {
            c.violations += 1;
            continue;
        };
        if clock < deadline {
            c.violations += 1;
            continue;
        }
        match d.late.as_str() {
            "gap" => c.postponed_gap += 1,
            "order" => c.postponed_order += 1,
            "late_arrival" => c.postponed_late_arrival += 1,
            "resync" => c.postponed_resync += 1,
            _ if clock > deadline + EVENT_STEP_US => c.violations += 1,
            _ => {}
        }
    }
    c
}

/// Longest gap between consecutive deliveries at an operative node after the
/// first crash, the crash itself counting as the start. A node that still
/// knows of undelivered messages at the end contributes its final stall up to
/// the END record. Zero without crashes.
pub fn blocked_interval(view: &TraceView) -> u64 {
    let Some(c) = view.first_crash() else {
        return 0;
    };
    let mut worst = 0;
    let empty = Vec::new();
    for node in view.operative() {
        let ds = view.deliveries.get(&node).unwrap_or(&empty);
        let mut last = c;
        for d in ds.iter().filter(|d| d.time >= c) {
            worst = worst.max(d.time - last);
            last = d.time;
        }
        let delivered: HashSet<&str> = ds.iter().map(|d| d.msg.as_str()).collect();
        let stalled = view
            .first_known
            .keys()
            .any(|(m, n)| *n == node && !delivered.contains(m.as_str()));
        if stalled {
            worst = worst.max(view.end.saturating_sub(last));
        }
    }
    worst
}

/// Broadcast-to-delivery latencies of every delivery, sorted.
pub fn delivery_latencies(view: &TraceView) -> Vec<u64> {
    let mut v: Vec<u64> = view
        .deliveries
        .values()
        .flatten()
        .filter_map(|d| view.broadcasts.get(&d.msg).map(|b| d.time - b.time))
        .collect();
    v.sort_unstable();
    v
}

/// Nearest-rank percentile of sorted data; 0 for empty input.
pub fn percentile(sorted: &[u64], q: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let n = sorted.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::Detail;

    fn bcast(t: &mut Trace, time: u64, node: u32, id: &str, ts: u64) {
        t.push(
            time,
            NodeId(node),
            kinds::BCAST,
            id,
            Detail::new().kv("ts", ts).build(),
        );
    }

    fn deliver(t: &mut Trace, time: u64, node: u32, id: &str, ts: u64, path: &str) {
        t.push(
            time,
            NodeId(node),
            kinds::DELIVER,
            id,
            Detail::new().kv("ts", ts).kv("path", path).build(),
        );
    }

    fn end(t: &mut Trace, time: u64) {
        t.push(time, NodeId(0), kinds::END, "", "");
    }

    #[test]
    fn opposite_orders_are_one_violation() {
        let mut t = Trace::new();
        bcast(&mut t, 0, 0, "0:1", 10);
        bcast(&mut t, 0, 1, "1:1", 10);
        deliver(&mut t, 5, 0, "0:1", 10, "GMD_PATH");
        deliver(&mut t, 6, 0, "1:1", 10, "GMD_PATH");
        deliver(&mut t, 5, 1, "1:1", 10, "GMD_PATH");
        deliver(&mut t, 6, 1, "0:1", 10, "GMD_PATH");
        end(&mut t, 10);
        let v = check_total_order(&t).unwrap();
        assert_eq!(v.len(), 1);
        assert!(matches!(v[0].kind, ViolationKind::CrossNode { .. }));
    }

    #[test]
    fn single_node_reports_only_timestamp_inversions() {
        let mut t = Trace::new();
        bcast(&mut t, 0, 0, "0:1", 10);
        bcast(&mut t, 0, 0, "0:2", 20);
        deliver(&mut t, 5, 0, "0:2", 20, "DEADLINE_PATH");
        deliver(&mut t, 6, 0, "0:1", 10, "GMD_PATH");
        end(&mut t, 10);
        let v = check_total_order(&t).unwrap();
        assert_eq!(
            v,
            vec![Violation {
                kind: ViolationKind::IntraNode { node: NodeId(0) },
                first: "0:2".into(),
                second: "0:1".into()
            }]
        );
    }

    #[test]
    fn missing_end_or_broadcast_is_incomplete() {
        let mut t = Trace::new();
        bcast(&mut t, 0, 0, "0:1", 10);
        assert!(check_total_order(&t).is_err());
        let mut t = Trace::new();
        deliver(&mut t, 5, 0, "0:1", 10, "GMD_PATH");
        end(&mut t, 6);
        assert!(matches!(
            case_statistics(&t),
            Err(OracleError::IncompleteTrace(_))
        ));
    }

    #[test]
    fn overtaken_before_knowing_is_case2() {
        let mut t = Trace::new();
        bcast(&mut t, 0, 0, "0:1", 10);
        bcast(&mut t, 1, 1, "1:1", 11);
        t.push(2, NodeId(2), kinds::KNOW, "1:1", "via=copy");
        deliver(&mut t, 20, 2, "1:1", 11, "DEADLINE_PATH");
        t.push(25, NodeId(2), kinds::KNOW, "0:1", "via=relay");
        deliver(&mut t, 25, 2, "0:1", 10, "DEADLINE_PATH");
        end(&mut t, 30);
        let v = TraceView::parse(&t).unwrap();
        assert_eq!(classify_case(&v, "0:1", NodeId(2)), Some(CaseClass::Case2));
        assert_eq!(classify_case(&v, "1:1", NodeId(2)), Some(CaseClass::Case1));
        let s = case_statistics_of(&v);
        assert_eq!(s.case2, 1);
    }

    #[test]
    fn seen_vector_knowledge_is_case1() {
        let mut t = Trace::new();
        bcast(&mut t, 0, 0, "0:1", 10);
        bcast(&mut t, 1, 1, "1:1", 11);
        t.push(3, NodeId(2), kinds::KNOW, "0:1", "via=seen");
        deliver(&mut t, 20, 2, "1:1", 11, "DEADLINE_PATH");
        deliver(&mut t, 25, 2, "0:1", 10, "DEADLINE_PATH");
        end(&mut t, 30);
        let v = TraceView::parse(&t).unwrap();
        assert_eq!(classify_case(&v, "0:1", NodeId(2)), Some(CaseClass::Case1));
    }

    #[test]
    fn blocked_interval_counts_from_the_crash() {
        let mut t = Trace::new();
        bcast(&mut t, 0, 0, "0:1", 0);
        deliver(&mut t, 10, 1, "0:1", 0, "GMD_PATH");
        t.push(100, NodeId(2), kinds::CRASH, "", "");
        bcast(&mut t, 150, 0, "0:2", 150);
        deliver(&mut t, 400, 1, "0:2", 150, "GMD_PATH");
        deliver(&mut t, 450, 0, "0:2", 150, "GMD_PATH");
        end(&mut t, 1000);
        let v = TraceView::parse(&t).unwrap();
        assert_eq!(blocked_interval(&v), 350);
    }

    #[test]
    fn nearest_rank_percentiles() {
        let v: Vec<u64> = (1..=10).map(|x| x * 100).collect();
        assert_eq!(percentile(&v, 0.5), 500);
        assert_eq!(percentile(&v, 0.99), 1000);
        assert_eq!(percentile(&[], 0.5), 0);
    }
}
