//! Scenario execution: wires the protocol state machines to the kernel.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};
use std::io;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use thiserror::Error;

use super::config::{AckMode, ConfigError, ParticipantCount, Scenario, ScenarioConfig};
use super::metrics::{LatencyPercentiles, RunMetrics};
use super::oracle::{self, OracleError, TraceView};
use crate::delay::compute_bound;
use crate::gmd::{GmdAck, GmdMessage, GmdNodeState};
use crate::insurance::{Effect, InsuranceNode, InsuranceParams, Mode, ModeEvent, Timer, Wire};
use crate::kernel::trace::kinds;
use crate::kernel::{mix, Detail, EventKind, Kernel, Payload, SimEvent, Trace};
use crate::order::{
    encode_histories, encode_nodes, encode_tx_list, ClientState, OrderForward, OrderRequest,
    OrderResponse, ParticipantState, RetryDecision, ServerState, TxId,
};
use crate::{MsgId, NodeId, SimTime};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("run failed at sim time {at}us: {msg}")]
    Module { at: SimTime, msg: String },
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Content of an abcast message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Body {
    Plain,
    /// An order request accepted by server `contact`.
    Order {
        req: OrderRequest,
        contact: NodeId,
    },
}

#[derive(Debug, Clone)]
enum Ev {
    Ins(Wire<Body>),
    GmdMsg {
        msg: GmdMessage<Body>,
        acks: Vec<GmdAck>,
    },
    GmdAcks(Vec<GmdAck>),
    DirectMsg {
        tx: TxId,
        msg: GmdMessage<()>,
        members: BTreeSet<NodeId>,
    },
    DirectAck {
        tx: TxId,
        ack: GmdAck,
        members: BTreeSet<NodeId>,
    },
    OrderReq {
        req: OrderRequest,
        attempt: u32,
        forwarded_by: Option<NodeId>,
    },
    OrderResp(OrderResponse),
    OrderRetry {
        tx: TxId,
        attempt: u32,
    },
    OrderFwd(OrderForward),
    OrderSync {
        req: OrderRequest,
        resp: OrderResponse,
    },
    InsTimer(Timer),
    Flush,
    Submit(u64),
    Resync,
    NewView(NodeId),
    ServiceDone,
    RetryTx(TxId),
    ReqTimeout(TxId, u32),
}

const T_MSG: u64 = 0x4d53_4701;
const T_RELAY: u64 = 0x4d53_4702;
const T_RETX: u64 = 0x4d53_4703;
const T_ACK: u64 = 0x4d53_4704;
const T_REQ: u64 = 0x4d53_4705;
const T_HB: u64 = 0x4d53_4706;
const T_DIRECT: u64 = 0x4d53_4707;
const T_DIRECT_ACK: u64 = 0x4d53_4708;
const T_OREQ: u64 = 0x4d53_4709;
const T_ORESP: u64 = 0x4d53_470a;
const T_ORETRY: u64 = 0x4d53_470b;
const T_OFWD: u64 = 0x4d53_470c;
const T_OSYNC: u64 = 0x4d53_470d;
const SETUP: u64 = 0x5345_5455;
const WORKLOAD: u64 = 0x574f_524b;

fn id_key(id: MsgId) -> u64 {
    mix(id.sender.0 as u64, id.seq)
}

fn ack_key(acker: NodeId, msg: MsgId) -> u64 {
    mix(mix(T_ACK, acker.0 as u64), id_key(msg))
}

impl Payload for Ev {
    fn kind(&self) -> &'static str {
        match self {
            Ev::Ins(Wire::Msg(_)) | Ev::Ins(Wire::Retx { .. }) => "INS_MSG",
            Ev::Ins(Wire::Relay(_)) => "INS_RELAY",
            Ev::Ins(Wire::Ack(_)) => "INS_ACK",
            Ev::Ins(Wire::RetxReq { .. }) => "RETX_REQ",
            Ev::Ins(Wire::Heartbeat { .. }) => "HEARTBEAT",
            Ev::GmdMsg { .. } | Ev::DirectMsg { .. } => "GMD_MSG",
            Ev::GmdAcks(_) | Ev::DirectAck { .. } => "GMD_ACK",
            Ev::OrderReq { .. } => "ORDER_REQ",
            Ev::OrderResp(_) => "ORDER_RESP",
            Ev::OrderRetry { .. } => "ORDER_RETRY",
            Ev::OrderFwd(_) => "ORDER_FWD",
            Ev::OrderSync { .. } => "ORDER_SYNC",
            _ => "LOCAL",
        }
    }

    fn trace_id(&self) -> String {
        match self {
            Ev::Ins(Wire::Msg(m))
            | Ev::Ins(Wire::Relay(m))
            | Ev::Ins(Wire::Retx { msg: m, .. }) => m.id.to_string(),
            Ev::Ins(Wire::Ack(a)) => a.acked_msg.to_string(),
            Ev::Ins(Wire::RetxReq { missing, .. }) => missing.to_string(),
            Ev::GmdMsg { msg, .. } => msg.id.to_string(),
            Ev::GmdAcks(a) => a
                .first()
                .map(|a| a.acked_msg.to_string())
                .unwrap_or_default(),
            Ev::DirectMsg { tx, .. } | Ev::DirectAck { tx, .. } | Ev::OrderRetry { tx, .. } => {
                tx.to_string()
            }
            Ev::OrderReq { req, .. } | Ev::OrderSync { req, .. } => req.tx_id.to_string(),
            Ev::OrderResp(r) => r.tx_id.to_string(),
            Ev::OrderFwd(f) => f.tx_id.to_string(),
            _ => String::new(),
        }
    }

    fn delay_key(&self) -> u64 {
        match self {
            // copy 1 shares its key with the plain all-ack message so both
            // protocol variants see identical delays
            Ev::Ins(Wire::Msg(m)) => match m.copy_index {
                1 => mix(T_MSG, id_key(m.id)),
                c => mix(mix(T_MSG, id_key(m.id)), c as u64),
            },
            Ev::Ins(Wire::Relay(m)) => mix(mix(T_RELAY, id_key(m.id)), m.copy_index as u64),
            Ev::Ins(Wire::Retx { msg, attempt }) => {
                mix(mix(T_RETX, id_key(msg.id)), *attempt as u64)
            }
            Ev::Ins(Wire::Ack(a)) => ack_key(a.acker, a.acked_msg),
            Ev::Ins(Wire::RetxReq { missing, attempt }) => {
                mix(mix(T_REQ, id_key(*missing)), *attempt as u64)
            }
            Ev::Ins(Wire::Heartbeat { beat }) => mix(T_HB, *beat),
            Ev::GmdMsg { msg, .. } => mix(T_MSG, id_key(msg.id)),
            Ev::GmdAcks(a) => a.first().map_or(T_ACK, |a| ack_key(a.acker, a.acked_msg)),
            Ev::DirectMsg { tx, .. } => mix(T_DIRECT, tx.0),
            Ev::DirectAck { tx, ack, .. } => mix(mix(T_DIRECT_ACK, tx.0), ack.acker.0 as u64),
            Ev::OrderReq {
                req,
                attempt,
                forwarded_by,
            } => mix(
                mix(mix(T_OREQ, req.tx_id.0), *attempt as u64),
                forwarded_by.map_or(0, |n| n.0 as u64 + 1),
            ),
            Ev::OrderResp(r) => mix(T_ORESP, r.tx_id.0),
            Ev::OrderRetry { tx, attempt } => mix(mix(T_ORETRY, tx.0), *attempt as u64),
            Ev::OrderFwd(f) => mix(T_OFWD, f.tx_id.0),
            Ev::OrderSync { req, .. } => mix(T_OSYNC, req.tx_id.0),
            _ => 0,
        }
    }
}

#[derive(Debug, Default)]
struct Counters {
    protocol_msgs: u64,
    replication_msgs: u64,
    broadcasts: u64,
    order_requests: u64,
    rejects: u64,
    queue_max: u64,
    queue_delay_sum: u128,
    queue_delay_n: u64,
    tx_submitted: u64,
    tx_completed: u64,
    tx_given_up: u64,
    no_servers: u64,
    executed: u64,
    sync_failures: u64,
    suspicions: u64,
    anomalies: u64,
}

struct TxInfo {
    submitted_at: SimTime,
    exec_left: usize,
}

struct World {
    cfg: ScenarioConfig,
    servers: Vec<NodeId>,
    ins: Vec<Option<InsuranceNode<Body>>>,
    gmd: Vec<Option<GmdNodeState<Body>>>,
    piggy: Vec<Vec<GmdAck>>,
    srv: Vec<Option<ServerState>>,
    /// Servers each node has not seen removed by a view change.
    views: Vec<BTreeSet<NodeId>>,
    queue: Vec<VecDeque<(OrderRequest, SimTime)>>,
    busy: Vec<bool>,
    clients: BTreeMap<NodeId, ClientState>,
    parts: BTreeMap<NodeId, ParticipantState>,
    txs: HashMap<TxId, TxInfo>,
    planned: HashMap<TxId, BTreeSet<NodeId>>,
    backing_off: HashSet<TxId>,
    direct: HashMap<(NodeId, TxId), GmdNodeState<()>>,
    direct_done: HashSet<(NodeId, TxId)>,
    tx_latencies: Vec<u64>,
    c: Counters,
    error: Option<(SimTime, String)>,
}

fn ix(n: NodeId) -> usize {
    n.0 as usize
}

impl World {
    fn new(cfg: &ScenarioConfig) -> Self {
        let total = cfg.total_nodes() as usize;
        let servers: Vec<NodeId> = (0..cfg.num_order_servers).map(NodeId).collect();
        let group_abcast = matches!(cfg.scenario, Scenario::Abcast | Scenario::ServiceOverAbcast);
        let params = InsuranceParams {
            mode: cfg.mode,
            eta_us: cfg.eta_us,
            theta_us: cfg.theta(),
            epsilon_us: cfg.epsilon_us,
            safety_margin_us: cfg.safety_margin_us,
            percentile: cfg.percentile,
            window_size: cfg.window_size,
            prior_d_us: cfg.prior_d(),
            heartbeat_interval_us: cfg.heartbeat_interval_us,
            suspicion_timeout_us: cfg.suspicion_timeout_us,
        };
        let mut ins = vec![None; total];
        let mut gmd = vec![None; total];
        let mut srv = vec![None; total];
        for &s in &servers {
            if group_abcast {
                if cfg.mode == Mode::GmdOnly {
                    gmd[ix(s)] = Some(GmdNodeState::new(s, servers.iter().copied()));
                } else {
                    ins[ix(s)] = Some(InsuranceNode::new(s, servers.iter().copied(), params));
                }
            }
            if cfg.scenario != Scenario::Abcast {
                let admission = cfg.admission;
                srv[ix(s)] = Some(ServerState::new(s, cfg.history_depth, admission));
            }
        }
        let mut clients = BTreeMap::new();
        let mut parts = BTreeMap::new();
        if cfg.scenario.uses_clients() {
            for i in cfg.num_order_servers..cfg.total_nodes() {
                let n = NodeId(i);
                clients.insert(n, ClientState::new(n, servers.clone(), cfg.order.retry));
                parts.insert(n, ParticipantState::new(n));
            }
        }
        let all_servers: BTreeSet<NodeId> = servers.iter().copied().collect();
        World {
            cfg: cfg.clone(),
            servers,
            ins,
            gmd,
            piggy: vec![Vec::new(); total],
            srv,
            views: vec![all_servers; total],
            queue: vec![VecDeque::new(); total],
            busy: vec![false; total],
            clients,
            parts,
            txs: HashMap::new(),
            planned: HashMap::new(),
            backing_off: HashSet::new(),
            direct: HashMap::new(),
            direct_done: HashSet::new(),
            tx_latencies: Vec::new(),
            c: Counters::default(),
            error: None,
        }
    }

    fn fail(&mut self, at: SimTime, msg: String) {
        if self.error.is_none() {
            self.error = Some((at, msg));
        }
    }

    fn send(&mut self, k: &mut Kernel<Ev>, from: NodeId, to: NodeId, ev: Ev) {
        if matches!(ev, Ev::OrderSync { .. }) {
            self.c.replication_msgs += 1;
        } else {
            self.c.protocol_msgs += 1;
        }
        if let Err(e) = k.send(from, to, ev) {
            self.fail(k.now(), e.to_string());
        }
    }

    fn multicast(&mut self, k: &mut Kernel<Ev>, from: NodeId, to: &[NodeId], ev: Ev) {
        for &t in to {
            if t != from {
                self.send(k, from, t, ev.clone());
            }
        }
    }

    fn group_view(&self, node: NodeId) -> Vec<NodeId> {
        self.views[ix(node)].iter().copied().collect()
    }

    fn clock(k: &Kernel<Ev>, node: NodeId) -> u64 {
        k.read_clock(node).unwrap_or(0)
    }

    fn handle(&mut self, k: &mut Kernel<Ev>, ev: SimEvent<Ev>) {
        if self.error.is_some() {
            return;
        }
        let node = ev.target;
        let from = match ev.kind {
            EventKind::MessageArrival { from } => from,
            _ => node,
        };
        let Some(p) = ev.payload else { return };
        let now = k.now();
        match p {
            Ev::Ins(w) => {
                let clock = Self::clock(k, node);
                if let Some(n) = self.ins[ix(node)].as_mut() {
                    let fx = n.on_wire(from, w, now, clock);
                    self.apply_ins(k, node, fx);
                }
            }
            Ev::InsTimer(t) => {
                let clock = Self::clock(k, node);
                if let Some(n) = self.ins[ix(node)].as_mut() {
                    let fx = n.on_timer(t, now, clock);
                    self.apply_ins(k, node, fx);
                }
            }
            Ev::GmdMsg { msg, acks } => self.gmd_on_msg(k, node, msg, acks),
            Ev::GmdAcks(acks) => {
                if let Some(g) = self.gmd[ix(node)].as_mut() {
                    for a in &acks {
                        g.on_ack(a);
                    }
                    self.gmd_deliver(k, node);
                }
            }
            Ev::Flush => {
                let batch = std::mem::take(&mut self.piggy[ix(node)]);
                if !batch.is_empty() {
                    let to = self.group_view(node);
                    self.multicast(k, node, &to, Ev::GmdAcks(batch));
                }
                k.set_timer(node, self.cfg.ack_flush_us, Ev::Flush);
            }
            Ev::Submit(n) => match self.cfg.scenario {
                Scenario::Abcast => self.abcast_submit(k, node, Body::Plain),
                Scenario::DirectGmd => self.direct_submit(k, node, TxId(n)),
                Scenario::OrderService | Scenario::ServiceOverAbcast => {
                    self.client_submit(k, node, TxId(n))
                }
            },
            Ev::Resync => {
                match k.sync_clock_probabilistic(
                    node,
                    NodeId(0),
                    self.cfg.epsilon_us,
                    self.cfg.clocks.sync_max_attempts,
                ) {
                    Ok(_) => {
                        let clock = Self::clock(k, node);
                        if let Some(n) = self.ins[ix(node)].as_mut() {
                            let fx = n.on_resync(now, clock);
                            self.apply_ins(k, node, fx);
                        }
                    }
                    Err(crate::kernel::KernelError::SyncFailed { .. }) => self.c.sync_failures += 1,
                    Err(_) => {}
                }
                k.set_timer(node, self.cfg.resync_interval_us, Ev::Resync);
            }
            Ev::NewView(gone) => self.new_view(k, node, gone),
            Ev::DirectMsg { tx, msg, members } => self.direct_on_msg(k, node, tx, msg, members),
            Ev::DirectAck { tx, ack, members } => self.direct_on_ack(k, node, tx, ack, members),
            Ev::OrderReq { req, attempt, .. } => self.on_order_req(k, node, req, attempt),
            Ev::ServiceDone => self.service_done(k, node),
            Ev::OrderSync { req, resp } => {
                if let Some(s) = self.srv[ix(node)].as_mut() {
                    s.apply_replicated(&req, &resp);
                }
            }
            Ev::OrderResp(resp) => {
                let fwds = match self.clients.get_mut(&node) {
                    Some(c) => c.on_response(&resp),
                    None => Vec::new(),
                };
                if !fwds.is_empty() {
                    self.backing_off.remove(&resp.tx_id);
                }
                for (p, f) in fwds {
                    self.send(k, node, p, Ev::OrderFwd(f));
                }
            }
            Ev::OrderRetry { tx, attempt } => {
                if self.current_attempt(node, tx) != Some(attempt) {
                    return;
                }
                match self.clients.get_mut(&node).map(|c| c.on_reject(tx)) {
                    Some(RetryDecision::RetryAfter { wait, attempt }) => {
                        self.backing_off.insert(tx);
                        let d = Detail::new()
                            .kv("wait", wait)
                            .kv("attempt", attempt)
                            .build();
                        k.record(node, kinds::BACKOFF, tx.to_string(), d);
                        k.set_timer(node, wait, Ev::RetryTx(tx));
                    }
                    Some(RetryDecision::GiveUp) => self.give_up(k, node, tx),
                    None => {}
                }
            }
            Ev::RetryTx(tx) => {
                self.backing_off.remove(&tx);
                self.resend(k, node, tx);
            }
            Ev::ReqTimeout(tx, attempt) => {
                if self.backing_off.contains(&tx) || self.current_attempt(node, tx) != Some(attempt)
                {
                    return;
                }
                match self.clients.get_mut(&node).map(|c| c.on_reject(tx)) {
                    Some(RetryDecision::RetryAfter { .. }) => self.resend(k, node, tx),
                    Some(RetryDecision::GiveUp) => self.give_up(k, node, tx),
                    None => {}
                }
            }
            Ev::OrderFwd(f) => self.on_forward(k, node, f),
        }
    }

    // ---- abcast ----

    fn abcast_submit(&mut self, k: &mut Kernel<Ev>, node: NodeId, body: Body) {
        let now = k.now();
        let clock = Self::clock(k, node);
        if self.cfg.mode == Mode::GmdOnly {
            self.gmd_broadcast(k, node, body);
            return;
        }
        let Some(n) = self.ins[ix(node)].as_mut() else {
            return;
        };
        match n.broadcast_insured(body, now, clock) {
            Ok(fx) => self.apply_ins(k, node, fx),
            Err(e) => self.fail(now, e.to_string()),
        }
    }

    fn apply_ins(&mut self, k: &mut Kernel<Ev>, node: NodeId, fx: Vec<Effect<Body>>) {
        for e in fx {
            match e {
                Effect::Broadcast(w) => {
                    let to = self.group_view(node);
                    self.multicast(k, node, &to, Ev::Ins(w));
                }
                Effect::Send(to, w) => self.send(k, node, to, Ev::Ins(w)),
                Effect::Timer { after, timer } => {
                    k.set_timer(node, after, Ev::InsTimer(timer));
                }
                Effect::WakeAt { local } => {
                    if let Ok(t) = k.sim_time_for_local(node, local) {
                        k.set_timer_at(node, t, Ev::InsTimer(Timer::Wake));
                    }
                }
                Effect::Originated { id, ts, d_i } => {
                    self.c.broadcasts += 1;
                    k.record(
                        node,
                        kinds::BCAST,
                        id.to_string(),
                        Detail::new().kv("ts", ts).kv("d_i", d_i).build(),
                    );
                }
                Effect::Know { id, via } => {
                    k.record(
                        node,
                        kinds::KNOW,
                        id.to_string(),
                        Detail::new().kv("via", via.as_str()).build(),
                    );
                }
                Effect::Deliver(d) => {
                    let mut det = Detail::new()
                        .kv("ts", d.msg.ts)
                        .kv("path", d.path.as_str())
                        .kv("clock", d.clock);
                    if let (Some(dl), Some(b)) = (d.deadline, d.bound) {
                        det = det.kv("deadline", dl).kv("D", b);
                    }
                    det = det.kv("late", d.postponed.as_str());
                    k.record(node, kinds::DELIVER, d.msg.id.to_string(), det.build());
                    self.on_abcast_deliver(k, node, d.msg);
                }
                Effect::Suspect(n) => {
                    self.c.suspicions += 1;
                    k.record(
                        node,
                        kinds::SUSPECT,
                        "",
                        Detail::new().kv("suspect", n).build(),
                    );
                }
                Effect::Unsuspect(n) => {
                    k.record(
                        node,
                        kinds::UNSUSPECT,
                        "",
                        Detail::new().kv("suspect", n).build(),
                    );
                }
            }
        }
    }

    fn gmd_broadcast(&mut self, k: &mut Kernel<Ev>, node: NodeId, body: Body) {
        let clock = Self::clock(k, node);
        let Some(g) = self.gmd[ix(node)].as_mut() else {
            return;
        };
        let msg = g.broadcast(clock, body);
        let own = g.on_receive(msg.clone(), clock).expect("fresh message");
        self.c.broadcasts += 1;
        k.record(
            node,
            kinds::BCAST,
            msg.id.to_string(),
            Detail::new().kv("ts", msg.ts).build(),
        );
        k.record(node, kinds::KNOW, msg.id.to_string(), "via=own");
        let to = self.group_view(node);
        match self.cfg.ack_mode {
            AckMode::Instant => {
                self.multicast(
                    k,
                    node,
                    &to,
                    Ev::GmdMsg {
                        msg,
                        acks: Vec::new(),
                    },
                );
                self.multicast(k, node, &to, Ev::GmdAcks(vec![own]));
            }
            AckMode::Piggyback => {
                let mut acks = std::mem::take(&mut self.piggy[ix(node)]);
                acks.push(own);
                self.multicast(k, node, &to, Ev::GmdMsg { msg, acks });
            }
        }
        self.gmd_deliver(k, node);
    }

    fn gmd_on_msg(
        &mut self,
        k: &mut Kernel<Ev>,
        node: NodeId,
        msg: GmdMessage<Body>,
        acks: Vec<GmdAck>,
    ) {
        let clock = Self::clock(k, node);
        let Some(g) = self.gmd[ix(node)].as_mut() else {
            return;
        };
        for a in &acks {
            g.on_ack(a);
        }
        if !g.knows(msg.id) {
            let id = msg.id;
            if let Some(ack) = g.on_receive(msg, clock) {
                k.record(node, kinds::KNOW, id.to_string(), "via=copy");
                match self.cfg.ack_mode {
                    AckMode::Instant => {
                        let to = self.group_view(node);
                        self.multicast(k, node, &to, Ev::GmdAcks(vec![ack]));
                    }
                    AckMode::Piggyback => self.piggy[ix(node)].push(ack),
                }
            }
        }
        self.gmd_deliver(k, node);
    }

    fn gmd_deliver(&mut self, k: &mut Kernel<Ev>, node: NodeId) {
        let clock = Self::clock(k, node);
        let Some(g) = self.gmd[ix(node)].as_mut() else {
            return;
        };
        for m in g.try_deliver() {
            let det = Detail::new()
                .kv("ts", m.ts)
                .kv("path", "GMD_PATH")
                .kv("clock", clock)
                .build();
            k.record(node, kinds::DELIVER, m.id.to_string(), det);
            self.on_abcast_deliver(k, node, m);
        }
    }

    /// Service-over-abcast: every server sequences deliveries identically;
    /// the server that accepted the request answers it.
    fn on_abcast_deliver(&mut self, k: &mut Kernel<Ev>, node: NodeId, msg: GmdMessage<Body>) {
        let Body::Order { req, contact } = msg.payload else {
            return;
        };
        let Some(s) = self.srv[ix(node)].as_mut() else {
            return;
        };
        let fresh = s.lookup(req.tx_id).is_none();
        match s.assign(&req) {
            Ok(resp) => {
                if contact == node {
                    if fresh {
                        self.record_order(k, node, &req, &resp, None);
                    }
                    self.send(k, node, req.tx_host, Ev::OrderResp(resp));
                }
            }
            Err(e) => self.fail(k.now(), e.to_string()),
        }
    }

    fn new_view(&mut self, k: &mut Kernel<Ev>, node: NodeId, gone: NodeId) {
        let now = k.now();
        k.record(
            node,
            kinds::VIEW,
            "",
            Detail::new().kv("removed", gone).build(),
        );
        let was_active = self.views[ix(node)].last().copied();
        self.views[ix(node)].remove(&gone);
        let clock = Self::clock(k, node);
        if let Some(n) = self.ins[ix(node)].as_mut() {
            let fx = n.set_mode(ModeEvent::NewView(gone), now, Some(clock));
            self.apply_ins(k, node, fx);
        }
        if let Some(g) = self.gmd[ix(node)].as_mut() {
            g.remove_member(gone);
            self.gmd_deliver(k, node);
        }
        if self.cfg.scenario == Scenario::OrderService {
            let active = self.views[ix(node)].last().copied();
            if let Some(s) = self.srv[ix(node)].as_mut() {
                if was_active != Some(node) && active == Some(node) {
                    s.take_over(self.cfg.order.jump_gap);
                    let d = Detail::new().kv("next_order_no", s.next_order_no()).build();
                    k.record(node, kinds::TAKEOVER, "", d);
                }
            }
        }
        if let Some(c) = self.clients.get_mut(&node) {
            c.server_down(gone);
        }
    }

    // ---- order service ----

    fn record_order(
        &mut self,
        k: &mut Kernel<Ev>,
        node: NodeId,
        req: &OrderRequest,
        resp: &OrderResponse,
        qdelay: Option<u64>,
    ) {
        let mut d = Detail::new()
            .kv("order_no", resp.order_no)
            .kv("parts", encode_nodes(&req.participants))
            .kv("hist", encode_histories(&resp.histories));
        if let Some(q) = qdelay {
            d = d.kv("qdelay", q);
        }
        k.record(node, kinds::ORDER, req.tx_id.to_string(), d.build());
    }

    fn client_submit(&mut self, k: &mut Kernel<Ev>, host: NodeId, tx: TxId) {
        let now = k.now();
        let Some(participants) = self.planned.remove(&tx) else {
            return;
        };
        for p in &participants {
            if let Some(ps) = self.parts.get_mut(p) {
                ps.participate(tx);
            }
        }
        self.c.tx_submitted += 1;
        k.record(
            host,
            kinds::CLIENT_REQ,
            tx.to_string(),
            Detail::new()
                .kv("parts", encode_nodes(&participants))
                .build(),
        );
        self.txs.insert(
            tx,
            TxInfo {
                exec_left: participants.len(),
                submitted_at: now,
            },
        );
        let res = self
            .clients
            .get_mut(&host)
            .map(|c| c.tx_host_submit(tx, participants, now));
        match res {
            Some(Ok((server, req))) => {
                self.send(
                    k,
                    host,
                    server,
                    Ev::OrderReq {
                        req,
                        attempt: 1,
                        forwarded_by: None,
                    },
                );
                k.set_timer(
                    host,
                    self.cfg.order.retry.request_timeout_us,
                    Ev::ReqTimeout(tx, 1),
                );
            }
            Some(Err(_)) => self.no_servers(k, host, tx),
            None => {}
        }
    }

    fn current_attempt(&self, host: NodeId, tx: TxId) -> Option<u32> {
        self.clients.get(&host)?.outstanding(tx).map(|o| o.attempts)
    }

    fn resend(&mut self, k: &mut Kernel<Ev>, host: NodeId, tx: TxId) {
        let Some(c) = self.clients.get_mut(&host) else {
            return;
        };
        match c.resend(tx) {
            Ok(Some((server, req, attempt))) => {
                self.send(
                    k,
                    host,
                    server,
                    Ev::OrderReq {
                        req,
                        attempt,
                        forwarded_by: None,
                    },
                );
                k.set_timer(
                    host,
                    self.cfg.order.retry.request_timeout_us,
                    Ev::ReqTimeout(tx, attempt),
                );
            }
            Ok(None) => {}
            Err(_) => self.no_servers(k, host, tx),
        }
    }

    fn give_up(&mut self, k: &mut Kernel<Ev>, host: NodeId, tx: TxId) {
        self.c.tx_given_up += 1;
        k.record(host, kinds::GIVE_UP, tx.to_string(), "");
    }

    fn no_servers(&mut self, k: &mut Kernel<Ev>, host: NodeId, tx: TxId) {
        self.c.no_servers += 1;
        k.record(host, kinds::NO_SERVERS, tx.to_string(), "");
    }

    fn reject(&mut self, k: &mut Kernel<Ev>, server: NodeId, req: &OrderRequest, attempt: u32) {
        self.c.rejects += 1;
        k.record(
            server,
            kinds::REJECT,
            req.tx_id.to_string(),
            Detail::new().kv("attempt", attempt).build(),
        );
        self.send(
            k,
            server,
            req.tx_host,
            Ev::OrderRetry {
                tx: req.tx_id,
                attempt,
            },
        );
    }

    fn on_order_req(&mut self, k: &mut Kernel<Ev>, s: NodeId, req: OrderRequest, attempt: u32) {
        let now = k.now();
        let Some(st) = self.srv[ix(s)].as_mut() else {
            return;
        };
        if let Some(resp) = st.lookup(req.tx_id).cloned() {
            self.send(k, s, req.tx_host, Ev::OrderResp(resp));
            return;
        }
        if self.cfg.scenario == Scenario::ServiceOverAbcast {
            self.c.order_requests += 1;
            match st.admit(now) {
                crate::order::Admission::Admit => {
                    self.abcast_submit(k, s, Body::Order { req, contact: s })
                }
                crate::order::Admission::Reject => self.reject(k, s, &req, attempt),
            }
            return;
        }
        let active = self.views[ix(s)].last().copied().unwrap_or(s);
        if active != s {
            self.send(
                k,
                s,
                active,
                Ev::OrderReq {
                    req,
                    attempt,
                    forwarded_by: Some(s),
                },
            );
            return;
        }
        self.c.order_requests += 1;
        match st.admit(now) {
            crate::order::Admission::Reject => self.reject(k, s, &req, attempt),
            crate::order::Admission::Admit => {
                let q = &mut self.queue[ix(s)];
                q.push_back((req, now));
                self.c.queue_max = self.c.queue_max.max(q.len() as u64);
                if !self.busy[ix(s)] {
                    self.busy[ix(s)] = true;
                    k.set_timer(s, self.cfg.order.service_time_us, Ev::ServiceDone);
                }
            }
        }
    }

    fn service_done(&mut self, k: &mut Kernel<Ev>, s: NodeId) {
        let now = k.now();
        let Some((req, enq)) = self.queue[ix(s)].pop_front() else {
            self.busy[ix(s)] = false;
            return;
        };
        let Some(st) = self.srv[ix(s)].as_mut() else {
            return;
        };
        let fresh = st.lookup(req.tx_id).is_none();
        match st.assign(&req) {
            Ok(resp) => {
                let q = now - enq;
                self.c.queue_delay_sum += q as u128;
                self.c.queue_delay_n += 1;
                if fresh {
                    self.record_order(k, s, &req, &resp, Some(q));
                    let spares: Vec<NodeId> = self.views[ix(s)]
                        .iter()
                        .copied()
                        .filter(|&x| x != s)
                        .collect();
                    self.multicast(
                        k,
                        s,
                        &spares,
                        Ev::OrderSync {
                            req: req.clone(),
                            resp: resp.clone(),
                        },
                    );
                }
                self.send(k, s, req.tx_host, Ev::OrderResp(resp));
            }
            Err(e) => self.fail(now, e.to_string()),
        }
        if self.queue[ix(s)].is_empty() {
            self.busy[ix(s)] = false;
        } else {
            k.set_timer(s, self.cfg.order.service_time_us, Ev::ServiceDone);
        }
    }

    fn on_forward(&mut self, k: &mut Kernel<Ev>, node: NodeId, f: OrderForward) {
        let Some(ps) = self.parts.get_mut(&node) else {
            return;
        };
        match ps.participant_on_order(f.tx_id, f.order_no, f.history) {
            Ok(ready) => {
                for t in ready {
                    let d = match self.parts[&node].known(t) {
                        Some((no, h)) => Detail::new()
                            .kv("order_no", no)
                            .kv("hist", encode_tx_list(h))
                            .build(),
                        None => String::new(),
                    };
                    self.executed(k, node, t, d);
                }
            }
            Err(e) => {
                self.c.anomalies += 1;
                k.record(
                    node,
                    kinds::ANOMALY,
                    f.tx_id.to_string(),
                    Detail::new()
                        .kv("error", e.to_string().replace(',', ";"))
                        .build(),
                );
            }
        }
    }

    fn executed(&mut self, k: &mut Kernel<Ev>, node: NodeId, tx: TxId, detail: String) {
        self.c.executed += 1;
        k.record(node, kinds::EXEC, tx.to_string(), detail);
        if let Some(info) = self.txs.get_mut(&tx) {
            info.exec_left = info.exec_left.saturating_sub(1);
            if info.exec_left == 0 {
                let lat = k.now() - info.submitted_at;
                self.c.tx_completed += 1;
                self.tx_latencies.push(lat);
                k.record(
                    node,
                    kinds::TX_DONE,
                    tx.to_string(),
                    Detail::new().kv("latency", lat).build(),
                );
            }
        }
    }

    // ---- direct all-ack ordering among participants ----

    fn direct_submit(&mut self, k: &mut Kernel<Ev>, host: NodeId, tx: TxId) {
        let now = k.now();
        let Some(members) = self.planned.remove(&tx) else {
            return;
        };
        self.c.tx_submitted += 1;
        k.record(
            host,
            kinds::CLIENT_REQ,
            tx.to_string(),
            Detail::new().kv("parts", encode_nodes(&members)).build(),
        );
        self.txs.insert(
            tx,
            TxInfo {
                exec_left: members.len(),
                submitted_at: now,
            },
        );
        if members.len() == 1 {
            self.executed(k, host, tx, "path=direct".into());
            return;
        }
        let clock = Self::clock(k, host);
        let mut st = GmdNodeState::new(host, members.iter().copied());
        let msg = st.broadcast(clock, ());
        let ack = st.on_receive(msg.clone(), clock).expect("fresh message");
        self.direct.insert((host, tx), st);
        let to: Vec<NodeId> = members.iter().copied().collect();
        self.multicast(
            k,
            host,
            &to,
            Ev::DirectMsg {
                tx,
                msg,
                members: members.clone(),
            },
        );
        self.multicast(k, host, &to, Ev::DirectAck { tx, ack, members });
        self.direct_check(k, host, tx);
    }

    fn direct_on_msg(
        &mut self,
        k: &mut Kernel<Ev>,
        node: NodeId,
        tx: TxId,
        msg: GmdMessage<()>,
        members: BTreeSet<NodeId>,
    ) {
        if self.direct_done.contains(&(node, tx)) {
            return;
        }
        let clock = Self::clock(k, node);
        let st = self
            .direct
            .entry((node, tx))
            .or_insert_with(|| GmdNodeState::new(node, members.iter().copied()));
        if let Some(ack) = st.on_receive(msg, clock) {
            let to: Vec<NodeId> = members.iter().copied().collect();
            self.multicast(k, node, &to, Ev::DirectAck { tx, ack, members });
        }
        self.direct_check(k, node, tx);
    }

    fn direct_on_ack(
        &mut self,
        k: &mut Kernel<Ev>,
        node: NodeId,
        tx: TxId,
        ack: GmdAck,
        members: BTreeSet<NodeId>,
    ) {
        if self.direct_done.contains(&(node, tx)) {
            return;
        }
        self.direct
            .entry((node, tx))
            .or_insert_with(|| GmdNodeState::new(node, members.iter().copied()))
            .on_ack(&ack);
        self.direct_check(k, node, tx);
    }

    fn direct_check(&mut self, k: &mut Kernel<Ev>, node: NodeId, tx: TxId) {
        let Some(st) = self.direct.get_mut(&(node, tx)) else {
            return;
        };
        if st.try_deliver().is_empty() {
            return;
        }
        self.direct.remove(&(node, tx));
        self.direct_done.insert((node, tx));
        self.executed(k, node, tx, "path=direct".into());
    }
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub config: ScenarioConfig,
    pub metrics: RunMetrics,
    pub trace: Trace,
}

impl RunOutput {
    /// Writes `metrics.json`, `trace.csv` and the effective `config.json`.
    pub fn write_to(&self, dir: &Path) -> io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let metrics = serde_json::to_string_pretty(&self.metrics).map_err(io::Error::other)?;
        std::fs::write(dir.join("metrics.json"), metrics + "\n")?;
        std::fs::write(dir.join("config.json"), self.config.to_json() + "\n")?;
        let f = std::fs::File::create(dir.join("trace.csv"))?;
        self.trace.write_csv(io::BufWriter::new(f))
    }
}

fn crash_time(cfg: &ScenarioConfig, node: NodeId) -> Option<SimTime> {
    cfg.crash_schedule
        .iter()
        .filter(|c| c.node == node.0)
        .map(|c| c.at_us)
        .min()
}

/// Pre-draws the arrival process from its own generator so that every
/// scenario and mode sees the same workload for a seed.
fn plan_workload(cfg: &ScenarioConfig, world: &mut World, k: &mut Kernel<Ev>) {
    let rate = cfg.workload.arrival_rate_per_s;
    if rate <= 0.0 {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, WORKLOAD));
    let gap = Exp::new(rate / 1e6).expect("positive rate");
    let stop = (cfg.duration_us - cfg.workload.drain_us) as f64;
    let clients: Vec<NodeId> = (cfg.num_order_servers..cfg.total_nodes())
        .map(NodeId)
        .collect();
    let mut t = 0.0;
    let mut n: u64 = 0;
    loop {
        t += gap.sample(&mut rng);
        if t >= stop {
            break;
        }
        let at = t.ceil() as SimTime;
        n += 1;
        let alive = |x: &NodeId| crash_time(cfg, *x).is_none_or(|c| c > at);
        if cfg.scenario == Scenario::Abcast {
            let cands: Vec<NodeId> = world.servers.iter().copied().filter(alive).collect();
            let pick = rng.random_range(0..world.servers.len().max(1));
            if let Some(&node) = cands.get(pick % cands.len().max(1)) {
                k.schedule_client_request(node, at, Ev::Submit(n));
            }
            continue;
        }
        let size = match cfg.workload.participant_count {
            ParticipantCount::Fixed(s) => s,
            ParticipantCount::Uniform { min, max } => rng.random_range(min..=max),
        } as usize;
        let chosen: Vec<NodeId> = sample_indices(&mut rng, clients.len(), size.min(clients.len()))
            .into_iter()
            .map(|i| clients[i])
            .collect();
        let host = chosen[rng.random_range(0..chosen.len())];
        if !alive(&host) {
            continue;
        }
        world.planned.insert(TxId(n), chosen.into_iter().collect());
        k.schedule_client_request(host, at, Ev::Submit(n));
    }
}

/// Runs one scenario to completion and computes its metrics from the trace.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<RunOutput, RunError> {
    cfg.validate()?;
    let mut k: Kernel<Ev> = Kernel::new(cfg.seed, cfg.network.clone());
    k.set_record_sends(cfg.trace_sends);
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, SETUP));
    let total = cfg.total_nodes();
    for i in 0..total {
        if i == 0 {
            k.add_node(0, 0);
        } else {
            let o = cfg.clocks.max_offset_us as i64;
            let d = cfg.clocks.max_drift_ppm as i64;
            let offset = rng.random_range(-o..=o);
            let drift = rng.random_range(-d..=d);
            k.add_node(offset, drift);
        }
    }
    let mut world = World::new(cfg);
    for i in 1..total {
        let n = NodeId(i);
        if let Err(crate::kernel::KernelError::SyncFailed { .. }) =
            k.sync_clock_probabilistic(n, NodeId(0), cfg.epsilon_us, cfg.clocks.sync_max_attempts)
        {
            world.c.sync_failures += 1;
        }
        k.set_timer(n, cfg.resync_interval_us, Ev::Resync);
    }
    for c in &cfg.crash_schedule {
        k.schedule_crash(NodeId(c.node), c.at_us);
        for i in 0..total {
            k.set_timer_at(
                NodeId(i),
                c.at_us + cfg.view_install_delay_us,
                Ev::NewView(NodeId(c.node)),
            );
        }
    }
    let group_abcast = matches!(cfg.scenario, Scenario::Abcast | Scenario::ServiceOverAbcast);
    if group_abcast {
        for &s in &world.servers {
            if cfg.mode == Mode::HybridOnSuspicion {
                k.set_timer(s, cfg.heartbeat_interval_us, Ev::InsTimer(Timer::Heartbeat));
                k.set_timer(
                    s,
                    cfg.heartbeat_interval_us,
                    Ev::InsTimer(Timer::SuspicionCheck),
                );
            }
            if cfg.mode == Mode::GmdOnly && cfg.ack_mode == AckMode::Piggyback {
                k.set_timer(s, cfg.ack_flush_us, Ev::Flush);
            }
        }
    }
    plan_workload(cfg, &mut world, &mut k);
    let events = k.run_until(cfg.duration_us, |k, ev| world.handle(k, ev));
    if let Some((at, msg)) = world.error.take() {
        return Err(RunError::Module { at, msg });
    }
    k.finish();
    let trace = k.into_trace();
    let metrics = compute_metrics(cfg, &trace, &world, events as u64)?;
    Ok(RunOutput {
        config: cfg.clone(),
        metrics,
        trace,
    })
}

fn compute_metrics(
    cfg: &ScenarioConfig,
    trace: &Trace,
    world: &World,
    events: u64,
) -> Result<RunMetrics, OracleError> {
    let view = TraceView::parse(trace)?;
    let stats = oracle::case_statistics_of(&view);
    let violations = oracle::total_order_violations(&view);
    let unexplained = violations
        .iter()
        .filter(|v| !stats.case2_msgs.contains(&v.first) && !stats.case2_msgs.contains(&v.second))
        .count() as u64;
    let deadline = oracle::check_deadline_bound(&view);
    let latencies = if cfg.scenario.uses_clients() {
        let mut v = world.tx_latencies.clone();
        v.sort_unstable();
        v
    } else {
        oracle::delivery_latencies(&view)
    };
    let max_bound = view
        .deliveries
        .values()
        .flatten()
        .filter_map(|d| d.bound)
        .max()
        .unwrap_or(0);
    let bound_cfg = crate::delay::DelayBoundConfig {
        percentile: cfg.percentile,
        eta_us: cfg.eta_us,
        theta_us: cfg.theta(),
        epsilon_us: cfg.epsilon_us,
        safety_margin_us: cfg.safety_margin_us,
    };
    let c = &world.c;
    let per_tx_base = if cfg.scenario == Scenario::Abcast {
        c.broadcasts
    } else {
        c.tx_completed
    };
    Ok(RunMetrics {
        scenario: cfg.scenario.as_str().to_string(),
        mode: cfg.mode.to_string(),
        seed: cfg.seed,
        delivered_total: stats.gmd_path_count + stats.deadline_path_count,
        case1_count: stats.case1,
        case2_count: stats.case2,
        gmd_path_count: stats.gmd_path_count,
        deadline_path_count: stats.deadline_path_count,
        order_violations: violations.len() as u64,
        latency_percentiles: LatencyPercentiles {
            p50_us: oracle::percentile(&latencies, 0.5),
            p99_us: oracle::percentile(&latencies, 0.99),
            p999_us: oracle::percentile(&latencies, 0.999),
        },
        messages_per_tx_mean: if per_tx_base > 0 {
            c.protocol_msgs as f64 / per_tx_base as f64
        } else {
            0.0
        },
        rejected_requests: c.rejects,
        blocked_interval_us: oracle::blocked_interval(&view),
        broadcasts: c.broadcasts,
        undelivered_pairs: stats.undelivered,
        case2_rate: stats.case2_rate,
        unexplained_violations: unexplained,
        nominal_d_us: cfg.prior_d(),
        nominal_bound_us: compute_bound(cfg.prior_d(), &bound_cfg).unwrap_or(0),
        theta_us: cfg.theta(),
        max_bound_us: max_bound,
        deadline_checked: deadline.checked,
        deadline_bound_violations: deadline.violations,
        postponed_gap: deadline.postponed_gap,
        postponed_order: deadline.postponed_order,
        postponed_late_arrival: deadline.postponed_late_arrival,
        postponed_resync: deadline.postponed_resync,
        executed_total: c.executed,
        tx_submitted: c.tx_submitted,
        tx_completed: c.tx_completed,
        tx_given_up: c.tx_given_up,
        no_server_errors: c.no_servers,
        order_requests: c.order_requests,
        reject_fraction: if c.order_requests > 0 {
            c.rejects as f64 / c.order_requests as f64
        } else {
            0.0
        },
        server_queue_max: c.queue_max,
        server_queue_delay_mean_us: if c.queue_delay_n > 0 {
            c.queue_delay_sum as f64 / c.queue_delay_n as f64
        } else {
            0.0
        },
        protocol_messages: c.protocol_msgs,
        replication_messages: c.replication_msgs,
        suspicions: c.suspicions,
        sync_failures: c.sync_failures,
        anomalies: c.anomalies,
        events_processed: events,
    })
}
