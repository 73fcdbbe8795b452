//! External transaction-ordering service.
//!
//! A transaction host asks one of a few dedicated servers for a global order
//! number. The response carries, for every participant, the short list of
//! earlier-ordered transactions that also involve it. A participant uses
//! that history to decide which of its not-yet-ordered transactions it must
//! wait for; anything absent from the history is irrelevant, which removes
//! cascaded waiting.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::{Micros, NodeId, SimTime};

pub const DEFAULT_HISTORY_DEPTH: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TxId(pub u64);

impl fmt::Display for TxId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "T{}", self.0)
    }
}

impl FromStr for TxId {
    type Err = std::num::ParseIntError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.strip_prefix('T').unwrap_or(s).parse().map(TxId)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrderRequest {
    pub tx_id: TxId,
    pub tx_host: NodeId,
    pub participants: BTreeSet<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrderResponse {
    pub tx_id: TxId,
    pub order_no: u64,
    /// Per participant: earlier-ordered transactions involving it, oldest first.
    pub histories: BTreeMap<NodeId, Vec<TxId>>,
}

/// What a transaction host forwards to one participant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrderForward {
    pub tx_id: TxId,
    pub order_no: u64,
    pub history: Vec<TxId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OrderError {
    #[error("server overloaded; retry after backoff")]
    Overload,
    #[error("no order server is operative")]
    NoServers,
    #[error("node {node} is not a participant of {tx}")]
    UnknownTx { node: NodeId, tx: TxId },
    #[error("order request {0} has no participants")]
    NoParticipants(TxId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Admission {
    Admit,
    Reject,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdmissionConfig {
    pub rate_per_s: u64,
    pub burst: u64,
}

const TOKEN: u128 = 1_000_000;

/// Token bucket kept in millionths of a token so refills stay exact.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBucket {
    cfg: AdmissionConfig,
    scaled: u128,
    last: SimTime,
}

impl TokenBucket {
    /// A full bucket.
    pub fn new(cfg: AdmissionConfig) -> Self {
        Self {
            cfg,
            scaled: cfg.burst as u128 * TOKEN,
            last: 0,
        }
    }

    pub fn tokens(&self) -> f64 {
        self.scaled as f64 / TOKEN as f64
    }

    /// A zero rate is a closed valve: nothing is admitted, not even the burst.
    pub fn admit(&mut self, now: SimTime) -> Admission {
        if self.cfg.rate_per_s == 0 {
            return Admission::Reject;
        }
        let dt = now.saturating_sub(self.last) as u128;
        self.last = self.last.max(now);
        let cap = self.cfg.burst as u128 * TOKEN;
        self.scaled = (self.scaled + dt * self.cfg.rate_per_s as u128).min(cap);
        if self.scaled >= TOKEN {
            self.scaled -= TOKEN;
            Admission::Admit
        } else {
            Admission::Reject
        }
    }
}

/// One order server. Only the active sequencer assigns numbers; spares keep
/// a replicated copy of the logs so they can take over.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub id: NodeId,
    next_order_no: u64,
    history_depth: usize,
    per_participant_log: BTreeMap<NodeId, VecDeque<(u64, TxId)>>,
    admission: Option<TokenBucket>,
    responses: HashMap<TxId, OrderResponse>,
    max_seen: u64,
}

impl ServerState {
    pub fn new(id: NodeId, history_depth: usize, admission: Option<AdmissionConfig>) -> Self {
        Self {
            id,
            next_order_no: 1,
            history_depth,
            per_participant_log: BTreeMap::new(),
            admission: admission.map(TokenBucket::new),
            responses: HashMap::new(),
            max_seen: 0,
        }
    }

    pub fn next_order_no(&self) -> u64 {
        self.next_order_no
    }

    /// Highest order number assigned or replicated here.
    pub fn max_seen(&self) -> u64 {
        self.max_seen
    }

    /// Retained log of `participant`, oldest first.
    pub fn log(&self, participant: NodeId) -> impl Iterator<Item = (u64, TxId)> + '_ {
        self.per_participant_log
            .get(&participant)
            .into_iter()
            .flat_map(|l| l.iter().copied())
    }

    pub fn admit(&mut self, now: SimTime) -> Admission {
        match &mut self.admission {
            Some(b) => b.admit(now),
            None => Admission::Admit,
        }
    }

    /// The response already given for `tx_id`, if any.
    pub fn lookup(&self, tx_id: TxId) -> Option<&OrderResponse> {
        self.responses.get(&tx_id)
    }

    /// Admission followed by [`Self::assign`]. A duplicate returns the
    /// original response without consuming a token.
    pub fn handle_order_request(
        &mut self,
        req: &OrderRequest,
        now: SimTime,
    ) -> Result<OrderResponse, OrderError> {
        if let Some(r) = self.responses.get(&req.tx_id) {
            return Ok(r.clone());
        }
        match self.admit(now) {
            Admission::Admit => self.assign(req),
            Admission::Reject => Err(OrderError::Overload),
        }
    }

    /// Assigns the next order number and computes histories.
    pub fn assign(&mut self, req: &OrderRequest) -> Result<OrderResponse, OrderError> {
        if let Some(r) = self.responses.get(&req.tx_id) {
            return Ok(r.clone());
        }
        if req.participants.is_empty() {
            return Err(OrderError::NoParticipants(req.tx_id));
        }
        let order_no = self.next_order_no;
        self.next_order_no += 1;
        let resp = OrderResponse {
            tx_id: req.tx_id,
            order_no,
            histories: self.histories_for(&req.participants),
        };
        self.record(req, &resp);
        Ok(resp)
    }

    fn histories_for(&self, participants: &BTreeSet<NodeId>) -> BTreeMap<NodeId, Vec<TxId>> {
        participants
            .iter()
            .map(|&p| (p, self.log(p).map(|(_, t)| t).collect()))
            .collect()
    }

    fn record(&mut self, req: &OrderRequest, resp: &OrderResponse) {
        for &p in &req.participants {
            let log = self.per_participant_log.entry(p).or_default();
            if log.back().is_some_and(|&(n, _)| n >= resp.order_no) {
                continue;
            }
            log.push_back((resp.order_no, req.tx_id));
            while log.len() > self.history_depth {
                log.pop_front();
            }
        }
        self.max_seen = self.max_seen.max(resp.order_no);
        self.responses.insert(req.tx_id, resp.clone());
    }

    /// Applies an assignment made by the active sequencer (spare role).
    pub fn apply_replicated(&mut self, req: &OrderRequest, resp: &OrderResponse) {
        if !self.responses.contains_key(&req.tx_id) {
            self.record(req, resp);
        }
    }

    /// Becomes the active sequencer, skipping `jump_gap` numbers past the
    /// highest one seen so in-flight assignments of the old sequencer
    /// cannot collide.
    pub fn take_over(&mut self, jump_gap: u64) {
        self.next_order_no = self.next_order_no.max(self.max_seen + jump_gap + 1);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetryPolicy {
    pub backoff_base_us: Micros,
    pub backoff_cap_us: Micros,
    pub max_retries: u32,
    /// Resubmit to the next server when no answer arrives in this time.
    pub request_timeout_us: Micros,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            backoff_base_us: 1_000,
            backoff_cap_us: 64_000,
            max_retries: 8,
            request_timeout_us: 200_000,
        }
    }
}

impl RetryPolicy {
    /// Wait before retry number `attempt` (1-based).
    pub fn backoff(&self, attempt: u32) -> Micros {
        let shift = attempt.saturating_sub(1).min(32);
        self.backoff_base_us
            .saturating_mul(1u64 << shift)
            .min(self.backoff_cap_us)
    }
}

#[derive(Debug, Clone)]
pub struct Outstanding {
    pub req: OrderRequest,
    /// Submissions so far, the first one included.
    pub attempts: u32,
    pub server: NodeId,
    pub submitted_at: SimTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetryDecision {
    RetryAfter { wait: Micros, attempt: u32 },
    GiveUp,
}

/// Transaction-host side of the service.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: NodeId,
    servers: Vec<NodeId>,
    down: BTreeSet<NodeId>,
    rr: usize,
    pub policy: RetryPolicy,
    outstanding: BTreeMap<TxId, Outstanding>,
    completed: HashSet<TxId>,
}

impl ClientState {
    pub fn new(id: NodeId, servers: Vec<NodeId>, policy: RetryPolicy) -> Self {
        Self {
            id,
            servers,
            down: BTreeSet::new(),
            rr: 0,
            policy,
            outstanding: BTreeMap::new(),
            completed: HashSet::new(),
        }
    }

    pub fn outstanding(&self, tx_id: TxId) -> Option<&Outstanding> {
        self.outstanding.get(&tx_id)
    }

    pub fn outstanding_len(&self) -> usize {
        self.outstanding.len()
    }

    /// Stops using `server` (after a view excluding it).
    pub fn server_down(&mut self, server: NodeId) {
        self.down.insert(server);
    }

    /// Round robin over servers not known to be down.
    pub fn next_server(&mut self) -> Result<NodeId, OrderError> {
        for _ in 0..self.servers.len() {
            let s = self.servers[self.rr % self.servers.len()];
            self.rr = self.rr.wrapping_add(1);
            if !self.down.contains(&s) {
                return Ok(s);
            }
        }
        Err(OrderError::NoServers)
    }

    /// Starts ordering a finished transaction: returns the server to contact
    /// and the request.
    pub fn tx_host_submit(
        &mut self,
        tx_id: TxId,
        participants: BTreeSet<NodeId>,
        now: SimTime,
    ) -> Result<(NodeId, OrderRequest), OrderError> {
        if participants.is_empty() {
            return Err(OrderError::NoParticipants(tx_id));
        }
        let server = self.next_server()?;
        let req = OrderRequest {
            tx_id,
            tx_host: self.id,
            participants,
        };
        self.outstanding.insert(
            tx_id,
            Outstanding {
                req: req.clone(),
                attempts: 1,
                server,
                submitted_at: now,
            },
        );
        Ok((server, req))
    }

    /// Overload or timeout: decides whether and when to retry.
    pub fn on_reject(&mut self, tx_id: TxId) -> RetryDecision {
        let Some(o) = self.outstanding.get(&tx_id) else {
            return RetryDecision::GiveUp;
        };
        if o.attempts > self.policy.max_retries {
            self.outstanding.remove(&tx_id);
            return RetryDecision::GiveUp;
        }
        RetryDecision::RetryAfter {
            wait: self.policy.backoff(o.attempts),
            attempt: o.attempts,
        }
    }

    /// Resubmits an outstanding request to the next server.
    pub fn resend(
        &mut self,
        tx_id: TxId,
    ) -> Result<Option<(NodeId, OrderRequest, u32)>, OrderError> {
        if !self.outstanding.contains_key(&tx_id) {
            return Ok(None);
        }
        let server = match self.next_server() {
            Ok(s) => s,
            Err(e) => {
                self.outstanding.remove(&tx_id);
                return Err(e);
            }
        };
        let o = self.outstanding.get_mut(&tx_id).expect("checked above");
        o.attempts += 1;
        o.server = server;
        Ok(Some((server, o.req.clone(), o.attempts)))
    }

    /// Handles a response: one forward per participant, or nothing for a
    /// duplicate or unknown response.
    pub fn on_response(&mut self, resp: &OrderResponse) -> Vec<(NodeId, OrderForward)> {
        let Some(o) = self.outstanding.remove(&resp.tx_id) else {
            return Vec::new();
        };
        self.completed.insert(resp.tx_id);
        o.req
            .participants
            .iter()
            .map(|&p| {
                (
                    p,
                    OrderForward {
                        tx_id: resp.tx_id,
                        order_no: resp.order_no,
                        history: resp.histories.get(&p).cloned().unwrap_or_default(),
                    },
                )
            })
            .collect()
    }
}

/// Participant side: executes transactions once their histories allow.
#[derive(Debug, Clone, Default)]
pub struct ParticipantState {
    pub id: NodeId,
    known_orders: BTreeMap<TxId, (u64, Vec<TxId>)>,
    executed: Vec<TxId>,
    executed_set: HashSet<TxId>,
    pending_participations: BTreeSet<TxId>,
}

impl ParticipantState {
    pub fn new(id: NodeId) -> Self {
        Self {
            id,
            ..Self::default()
        }
    }

    /// Registers a transaction this node takes part in, before its order is
    /// known.
    pub fn participate(&mut self, tx_id: TxId) {
        if !self.executed_set.contains(&tx_id) {
            self.pending_participations.insert(tx_id);
        }
    }

    pub fn executed(&self) -> &[TxId] {
        &self.executed
    }

    pub fn is_pending(&self, tx_id: TxId) -> bool {
        self.pending_participations.contains(&tx_id)
    }

    /// Pending transactions whose order has not arrived yet.
    pub fn awaiting_order(&self) -> impl Iterator<Item = TxId> + '_ {
        self.pending_participations
            .iter()
            .copied()
            .filter(|t| !self.known_orders.contains_key(t))
    }

    pub fn order_of(&self, tx_id: TxId) -> Option<u64> {
        self.known_orders.get(&tx_id).map(|(n, _)| *n)
    }

    /// Order number and history received for `tx_id`.
    pub fn known(&self, tx_id: TxId) -> Option<(u64, &[TxId])> {
        self.known_orders
            .get(&tx_id)
            .map(|(n, h)| (*n, h.as_slice()))
    }

    /// Records an order and returns the transactions that became executable,
    /// in execution order. Replayed forwards return nothing.
    pub fn participant_on_order(
        &mut self,
        tx_id: TxId,
        order_no: u64,
        history: Vec<TxId>,
    ) -> Result<Vec<TxId>, OrderError> {
        if self.executed_set.contains(&tx_id) || self.known_orders.contains_key(&tx_id) {
            return Ok(Vec::new());
        }
        if !self.pending_participations.contains(&tx_id) {
            return Err(OrderError::UnknownTx {
                node: self.id,
                tx: tx_id,
            });
        }
        self.known_orders.insert(tx_id, (order_no, history));
        let mut out = Vec::new();
        loop {
            let mut ready: Vec<(u64, TxId)> = self
                .known_orders
                .iter()
                .filter(|(t, _)| self.pending_participations.contains(t))
                .filter(|(_, (_, h))| h.iter().all(|d| !self.pending_participations.contains(d)))
                .map(|(&t, &(n, _))| (n, t))
                .collect();
            if ready.is_empty() {
                break;
            }
            ready.sort();
            let (_, t) = ready[0];
            self.pending_participations.remove(&t);
            self.executed_set.insert(t);
            self.executed.push(t);
            out.push(t);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CostMode {
    Service,
    Direct,
}

impl fmt::Display for CostMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CostMode::Service => "SERVICE",
            CostMode::Direct => "DIRECT",
        })
    }
}

/// Point-to-point messages needed to order one transaction among `k`
/// participants: `k^2 - 1` for an all-ack broadcast among them, `k + 2`
/// through the service (request, response, one forward each).
pub fn message_cost_model(k: u64, mode: CostMode) -> u64 {
    match mode {
        CostMode::Direct => (k * k).saturating_sub(1),
        CostMode::Service => k + 2,
    }
}

/// Encodes per-participant histories as `p:T1+T2/q:` for trace details.
pub fn encode_histories(h: &BTreeMap<NodeId, Vec<TxId>>) -> String {
    h.iter()
        .map(|(p, txs)| {
            let list: Vec<String> = txs.iter().map(|t| t.to_string()).collect();
            format!("{p}:{}", list.join("+"))
        })
        .collect::<Vec<_>>()
        .join("/")
}

pub fn decode_histories(s: &str) -> Option<BTreeMap<NodeId, Vec<TxId>>> {
    let mut out = BTreeMap::new();
    if s.is_empty() {
        return Some(out);
    }
    for part in s.split('/') {
        let (p, list) = part.split_once(':')?;
        let txs = if list.is_empty() {
            Vec::new()
        } else {
            list.split('+')
                .map(|t| t.parse().ok())
                .collect::<Option<Vec<TxId>>>()?
        };
        out.insert(NodeId(p.parse().ok()?), txs);
    }
    Some(out)
}

pub fn encode_tx_list(txs: &[TxId]) -> String {
    txs.iter()
        .map(|t| t.to_string())
        .collect::<Vec<_>>()
        .join("+")
}

pub fn encode_nodes(nodes: &BTreeSet<NodeId>) -> String {
    nodes
        .iter()
        .map(|n| n.to_string())
        .collect::<Vec<_>>()
        .join("+")
}

pub fn decode_nodes(s: &str) -> Option<BTreeSet<NodeId>> {
    if s.is_empty() {
        return Some(BTreeSet::new());
    }
    s.split('+').map(|n| n.parse().ok().map(NodeId)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(ids: &[u32]) -> BTreeSet<NodeId> {
        ids.iter().copied().map(NodeId).collect()
    }

    fn req(tx: u64, parts: &[u32]) -> OrderRequest {
        OrderRequest {
            tx_id: TxId(tx),
            tx_host: NodeId(9),
            participants: set(parts),
        }
    }

    #[test]
    fn first_and_second_requests() {
        let mut s = ServerState::new(NodeId(0), DEFAULT_HISTORY_DEPTH, None);
        let r1 = s.handle_order_request(&req(1, &[10, 11]), 0).unwrap();
        assert_eq!(r1.order_no, 1);
        assert_eq!(
            r1.histories,
            BTreeMap::from([(NodeId(10), vec![]), (NodeId(11), vec![])])
        );
        let r2 = s.handle_order_request(&req(2, &[11, 12]), 0).unwrap();
        assert_eq!(r2.order_no, 2);
        assert_eq!(
            r2.histories,
            BTreeMap::from([(NodeId(11), vec![TxId(1)]), (NodeId(12), vec![])])
        );
        let again = s.handle_order_request(&req(1, &[10, 11]), 0).unwrap();
        assert_eq!(again, r1);
        assert_eq!(s.next_order_no(), 3);
    }

    #[test]
    fn history_truncated_to_depth() {
        let mut s = ServerState::new(NodeId(0), 2, None);
        for t in 1..=4 {
            s.assign(&req(t, &[10])).unwrap();
        }
        let r = s.assign(&req(5, &[10])).unwrap();
        assert_eq!(r.histories[&NodeId(10)], vec![TxId(3), TxId(4)]);
    }

    #[test]
    fn token_bucket_examples() {
        let mut b = TokenBucket::new(AdmissionConfig {
            rate_per_s: 1,
            burst: 2,
        });
        assert_eq!(
            [b.admit(0), b.admit(0), b.admit(0)],
            [Admission::Admit, Admission::Admit, Admission::Reject]
        );
        let mut steady = TokenBucket::new(AdmissionConfig {
            rate_per_s: 1000,
            burst: 1,
        });
        assert!((0..1000).all(|i| steady.admit(i * 1000) == Admission::Admit));
        let mut closed = TokenBucket::new(AdmissionConfig {
            rate_per_s: 0,
            burst: 5,
        });
        assert!((0..10).all(|i| closed.admit(i * 1_000_000) == Admission::Reject));
    }

    #[test]
    fn overload_is_reported() {
        let mut s = ServerState::new(
            NodeId(0),
            4,
            Some(AdmissionConfig {
                rate_per_s: 1,
                burst: 1,
            }),
        );
        s.handle_order_request(&req(1, &[10]), 0).unwrap();
        assert_eq!(
            s.handle_order_request(&req(2, &[10]), 0),
            Err(OrderError::Overload)
        );
        // the duplicate does not need a token
        assert!(s.handle_order_request(&req(1, &[10]), 0).is_ok());
    }

    #[test]
    fn round_robin_over_servers() {
        let servers = vec![NodeId(0), NodeId(1), NodeId(2)];
        let mut c = ClientState::new(NodeId(5), servers, RetryPolicy::default());
        let hit: Vec<_> = (1..=4)
            .map(|t| c.tx_host_submit(TxId(t), set(&[6]), 0).unwrap().0)
            .collect();
        assert_eq!(hit, vec![NodeId(0), NodeId(1), NodeId(2), NodeId(0)]);
        for s in 0..3 {
            c.server_down(NodeId(s));
        }
        assert_eq!(
            c.tx_host_submit(TxId(9), set(&[6]), 0).unwrap_err(),
            OrderError::NoServers
        );
    }

    #[test]
    fn rejections_back_off_then_forward() {
        let policy = RetryPolicy {
            backoff_base_us: 100,
            backoff_cap_us: 150,
            max_retries: 3,
            ..RetryPolicy::default()
        };
        let mut c = ClientState::new(NodeId(5), vec![NodeId(0)], policy);
        c.tx_host_submit(TxId(1), set(&[6, 7, 8]), 0).unwrap();
        assert_eq!(
            c.on_reject(TxId(1)),
            RetryDecision::RetryAfter {
                wait: 100,
                attempt: 1
            }
        );
        c.resend(TxId(1)).unwrap();
        assert_eq!(
            c.on_reject(TxId(1)),
            RetryDecision::RetryAfter {
                wait: 150,
                attempt: 2
            }
        );
        c.resend(TxId(1)).unwrap();
        let mut s = ServerState::new(NodeId(0), 16, None);
        let resp = s
            .assign(&c.outstanding(TxId(1)).unwrap().req.clone())
            .unwrap();
        let fwd = c.on_response(&resp);
        assert_eq!(fwd.len(), 3);
        assert!(c.on_response(&resp).is_empty());
    }

    #[test]
    fn gives_up_after_max_retries() {
        let policy = RetryPolicy {
            max_retries: 1,
            ..RetryPolicy::default()
        };
        let mut c = ClientState::new(NodeId(5), vec![NodeId(0)], policy);
        c.tx_host_submit(TxId(1), set(&[6]), 0).unwrap();
        assert!(matches!(
            c.on_reject(TxId(1)),
            RetryDecision::RetryAfter { .. }
        ));
        c.resend(TxId(1)).unwrap();
        assert_eq!(c.on_reject(TxId(1)), RetryDecision::GiveUp);
    }

    #[test]
    fn cascaded_wait_is_avoided() {
        // node i takes part in Tx1 and Tx2; Tx1's history does not mention Tx2
        let mut p = ParticipantState::new(NodeId(1));
        p.participate(TxId(1));
        p.participate(TxId(2));
        assert_eq!(
            p.participant_on_order(TxId(1), 1, vec![]).unwrap(),
            vec![TxId(1)]
        );
    }

    #[test]
    fn history_dependency_blocks_until_executed() {
        let mut p = ParticipantState::new(NodeId(1));
        p.participate(TxId(1));
        p.participate(TxId(2));
        assert!(p
            .participant_on_order(TxId(2), 2, vec![TxId(1)])
            .unwrap()
            .is_empty());
        assert_eq!(
            p.participant_on_order(TxId(1), 1, vec![]).unwrap(),
            vec![TxId(1), TxId(2)]
        );
        assert!(p
            .participant_on_order(TxId(2), 2, vec![TxId(1)])
            .unwrap()
            .is_empty());
    }

    #[test]
    fn foreign_history_entries_do_not_block() {
        let mut p = ParticipantState::new(NodeId(1));
        p.participate(TxId(3));
        assert_eq!(
            p.participant_on_order(TxId(3), 3, vec![TxId(0)]).unwrap(),
            vec![TxId(3)]
        );
        assert_eq!(
            p.participant_on_order(TxId(7), 4, vec![]),
            Err(OrderError::UnknownTx {
                node: NodeId(1),
                tx: TxId(7)
            })
        );
    }

    #[test]
    fn cost_model_values() {
        let v = |k| {
            (
                message_cost_model(k, CostMode::Direct),
                message_cost_model(k, CostMode::Service),
            )
        };
        assert_eq!(v(1), (0, 3));
        assert_eq!(v(2), (3, 4));
        assert_eq!(v(3), (8, 5));
    }

    #[test]
    fn takeover_jumps_past_seen_numbers() {
        let mut active = ServerState::new(NodeId(2), 16, None);
        let mut spare = ServerState::new(NodeId(1), 16, None);
        for t in 1..=3 {
            let r = req(t, &[10]);
            let resp = active.assign(&r).unwrap();
            spare.apply_replicated(&r, &resp);
        }
        spare.take_over(100);
        let r = spare.assign(&req(4, &[10])).unwrap();
        assert_eq!(r.order_no, 104);
        assert_eq!(r.histories[&NodeId(10)], vec![TxId(1), TxId(2), TxId(3)]);
    }

    #[test]
    fn history_codec_round_trip() {
        let h = BTreeMap::from([(NodeId(3), vec![TxId(1), TxId(2)]), (NodeId(4), vec![])]);
        let s = encode_histories(&h);
        assert_eq!(s, "3:T1+T2/4:");
        assert_eq!(decode_histories(&s), Some(h));
        assert_eq!(
            decode_nodes(&encode_nodes(&set(&[1, 2]))),
            Some(set(&[1, 2]))
        );
    }
}
