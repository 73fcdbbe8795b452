//! Proactive synchronous insurance layered on the all-ack protocol.
//!
//! Every broadcast goes out twice, `eta` apart. Acks carry the acker's
//! contiguous-receipt vector so a node can tell which messages it is
//! missing; it holds back ordering past such gaps and asks the acker for a
//! retransmission. A node that got only the first copy re-broadcasts the
//! message on the sender's behalf after `eta + theta` (plus `rank * theta`
//! so that usually one relayer acts), unless it sees somebody else's relay
//! first.
//!
//! A pending message is delivered by the all-ack rule, or once the local
//! clock reaches `ts + D + epsilon` and nothing that could precede it is
//! known to be outstanding, whichever comes first. In `HybridOnSuspicion`
//! mode the deadline rule is only armed while some node is suspected.
//!
//! The state machine is pure: handlers return [`Effect`]s which the driver
//! applies to the kernel.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::delay::{compute_bound, DelayBoundConfig, DelayDistribution, DelaySample};
use crate::gmd::{GmdAck, GmdMessage, GmdNodeState};
use crate::{Micros, MsgId, NodeId, SeqVector, SimTime, Timestamp};

/// A deadline delivery may trail its deadline by at most this much local
/// time and still count as on time.
pub const EVENT_STEP_US: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Mode {
    GmdOnly,
    Hybrid,
    HybridOnSuspicion,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::GmdOnly => "GMD_ONLY",
            Mode::Hybrid => "HYBRID",
            Mode::HybridOnSuspicion => "HYBRID_ON_SUSPICION",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DeliveryPath {
    Gmd,
    Deadline,
}

impl DeliveryPath {
    pub fn as_str(&self) -> &'static str {
        match self {
            DeliveryPath::Gmd => "GMD_PATH",
            DeliveryPath::Deadline => "DEADLINE_PATH",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "GMD_PATH" => Some(DeliveryPath::Gmd),
            "DEADLINE_PATH" => Some(DeliveryPath::Deadline),
            _ => None,
        }
    }
}

/// Why a deadline delivery happened later than its deadline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Postponement {
    /// On time (within [`EVENT_STEP_US`]) or not late at all.
    None,
    /// A known gap could hide an earlier message.
    Gap,
    /// An earlier pending message had to go first.
    Order,
    /// The message itself arrived after its deadline.
    LateArrival,
    /// The local clock was stepped forward by a resync.
    Resync,
}

impl Postponement {
    pub fn as_str(&self) -> &'static str {
        match self {
            Postponement::None => "none",
            Postponement::Gap => "gap",
            Postponement::Order => "order",
            Postponement::LateArrival => "late_arrival",
            Postponement::Resync => "resync",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KnowVia {
    Own,
    Copy,
    Relay,
    Retransmission,
    SeenVector,
}

impl KnowVia {
    pub fn as_str(&self) -> &'static str {
        match self {
            KnowVia::Own => "own",
            KnowVia::Copy => "copy",
            KnowVia::Relay => "relay",
            KnowVia::Retransmission => "retx",
            KnowVia::SeenVector => "seen",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InsuranceMessage<B> {
    pub id: MsgId,
    pub ts: Timestamp,
    /// Sender's worst-case one-way delay estimate at broadcast time.
    pub d_i: Micros,
    /// 1 or 2.
    pub copy_index: u8,
    pub relayed_by: Option<NodeId>,
    pub payload: B,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InsuranceAck {
    pub acker: NodeId,
    pub acked_msg: MsgId,
    pub acker_ts: Timestamp,
    /// Contiguous receipt watermarks of the acker, its own broadcasts included.
    pub seen: SeqVector,
}

/// Messages exchanged by insurance nodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Wire<B> {
    /// One of the sender's two redundant copies.
    Msg(InsuranceMessage<B>),
    /// A proactive re-broadcast on behalf of the sender.
    Relay(InsuranceMessage<B>),
    /// A unicast answer to a retransmission request.
    Retx {
        msg: InsuranceMessage<B>,
        attempt: u32,
    },
    Ack(InsuranceAck),
    RetxReq {
        missing: MsgId,
        attempt: u32,
    },
    Heartbeat {
        beat: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Timer {
    SendCopy2(MsgId),
    RelayCheck(MsgId),
    RelayCopy2(MsgId),
    GapRetry { sender: NodeId, seq: u64 },
    Wake,
    Heartbeat,
    SuspicionCheck,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery<B> {
    pub msg: GmdMessage<B>,
    pub path: DeliveryPath,
    /// Local clock at delivery.
    pub clock: u64,
    /// `ts + D + epsilon` when a deadline was computed for the message.
    pub deadline: Option<u64>,
    pub bound: Option<Micros>,
    pub postponed: Postponement,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Effect<B> {
    /// Send to every other node of the group.
    Broadcast(Wire<B>),
    Send(NodeId, Wire<B>),
    Timer {
        after: Micros,
        timer: Timer,
    },
    /// Re-evaluate deliveries when the local clock reads `local`.
    WakeAt {
        local: u64,
    },
    Originated {
        id: MsgId,
        ts: Timestamp,
        d_i: Micros,
    },
    Know {
        id: MsgId,
        via: KnowVia,
    },
    Deliver(Delivery<B>),
    Suspect(NodeId),
    Unsuspect(NodeId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeEvent {
    Suspect(NodeId),
    SuspicionFalse(NodeId),
    NewView(NodeId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Suspicion {
    pub suspect: NodeId,
    pub raised_at: SimTime,
    pub cleared_at: Option<SimTime>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InsuranceError {
    #[error("insured broadcast is unavailable in GMD_ONLY mode")]
    GmdOnlyMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InsuranceParams {
    pub mode: Mode,
    pub eta_us: Micros,
    pub theta_us: Micros,
    pub epsilon_us: Micros,
    pub safety_margin_us: Micros,
    pub percentile: f64,
    pub window_size: usize,
    /// Worst-case delay used until the node has observed any traffic.
    pub prior_d_us: Micros,
    pub heartbeat_interval_us: Micros,
    pub suspicion_timeout_us: Micros,
}

impl Default for InsuranceParams {
    fn default() -> Self {
        Self {
            mode: Mode::Hybrid,
            eta_us: 2_000,
            theta_us: 1_000,
            epsilon_us: 1_000,
            safety_margin_us: 0,
            percentile: crate::delay::DEFAULT_PERCENTILE,
            window_size: crate::delay::DEFAULT_WINDOW,
            prior_d_us: 2_000,
            heartbeat_interval_us: 5_000,
            suspicion_timeout_us: 20_000,
        }
    }
}

impl InsuranceParams {
    pub fn bound_config(&self) -> DelayBoundConfig {
        DelayBoundConfig {
            percentile: self.percentile,
            eta_us: self.eta_us,
            theta_us: self.theta_us,
            epsilon_us: self.epsilon_us,
            safety_margin_us: self.safety_margin_us,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct DeadlineInfo {
    deadline: u64,
    bound: Micros,
}

#[derive(Debug, Clone)]
pub struct InsuranceNode<B> {
    gmd: GmdNodeState<B>,
    params: InsuranceParams,
    estimator: DelayDistribution,
    held: HashMap<MsgId, InsuranceMessage<B>>,
    sender_ts: BTreeMap<NodeId, BTreeMap<u64, Timestamp>>,
    second_copy_timers: HashMap<MsgId, SimTime>,
    relay_pending: HashSet<MsgId>,
    relays_seen: HashSet<MsgId>,
    deadlines: HashMap<MsgId, DeadlineInfo>,
    known_max: BTreeMap<NodeId, u64>,
    gaps: BTreeSet<(NodeId, u64)>,
    gap_sources: HashMap<(NodeId, u64), BTreeSet<NodeId>>,
    gap_attempts: HashMap<(NodeId, u64), u32>,
    gap_blocked: HashSet<MsgId>,
    abandoned: BTreeSet<(NodeId, u64)>,
    suspected: BTreeSet<NodeId>,
    suspicions: Vec<Suspicion>,
    last_heard: BTreeMap<NodeId, SimTime>,
    armed_wake: Option<u64>,
    resyncing: bool,
    beats: u64,
}

impl<B: Clone> InsuranceNode<B> {
    pub fn new(
        id: NodeId,
        membership: impl IntoIterator<Item = NodeId>,
        params: InsuranceParams,
    ) -> Self {
        let gmd = GmdNodeState::new(id, membership);
        let last_heard = gmd.membership().iter().map(|&m| (m, 0)).collect();
        Self {
            gmd,
            estimator: DelayDistribution::new(params.window_size),
            params,
            held: HashMap::new(),
            sender_ts: BTreeMap::new(),
            second_copy_timers: HashMap::new(),
            relay_pending: HashSet::new(),
            relays_seen: HashSet::new(),
            deadlines: HashMap::new(),
            known_max: BTreeMap::new(),
            gaps: BTreeSet::new(),
            gap_sources: HashMap::new(),
            gap_attempts: HashMap::new(),
            gap_blocked: HashSet::new(),
            abandoned: BTreeSet::new(),
            suspected: BTreeSet::new(),
            suspicions: Vec::new(),
            last_heard,
            armed_wake: None,
            resyncing: false,
            beats: 0,
        }
    }

    pub fn id(&self) -> NodeId {
        self.gmd.id()
    }

    pub fn gmd(&self) -> &GmdNodeState<B> {
        &self.gmd
    }

    pub fn params(&self) -> &InsuranceParams {
        &self.params
    }

    pub fn mode(&self) -> Mode {
        self.params.mode
    }

    pub fn estimator(&self) -> &DelayDistribution {
        &self.estimator
    }

    pub fn gaps(&self) -> &BTreeSet<(NodeId, u64)> {
        &self.gaps
    }

    pub fn suspected(&self) -> &BTreeSet<NodeId> {
        &self.suspected
    }

    pub fn suspicions(&self) -> &[Suspicion] {
        &self.suspicions
    }

    pub fn seen(&self) -> &SeqVector {
        self.gmd.seen()
    }

    /// Pending second-copy supervision timers (message, fire time).
    pub fn second_copy_timers(&self) -> impl Iterator<Item = (MsgId, SimTime)> + '_ {
        self.second_copy_timers.iter().map(|(k, v)| (*k, *v))
    }

    pub fn relay_pending(&self, id: MsgId) -> bool {
        self.relay_pending.contains(&id)
    }

    /// Whether the deadline rule is currently in force.
    pub fn deadlines_armed(&self) -> bool {
        match self.params.mode {
            Mode::GmdOnly => false,
            Mode::Hybrid => true,
            Mode::HybridOnSuspicion => !self.suspected.is_empty(),
        }
    }

    /// Armed deadline timers of pending messages: (message, local deadline).
    pub fn deadline_timers(&self) -> Vec<(MsgId, u64)> {
        if !self.deadlines_armed() {
            return Vec::new();
        }
        let mut v: Vec<_> = self
            .gmd
            .pending()
            .filter_map(|m| self.deadlines.get(&m.id).map(|d| (m.id, d.deadline)))
            .collect();
        v.sort();
        v
    }

    /// Worst-case one-way delay this node would encode now.
    pub fn current_d(&self) -> Micros {
        self.estimator
            .estimate_worst_case(&self.params.bound_config())
            .unwrap_or(self.params.prior_d_us)
    }

    fn bound_for(&self, sender_d: Micros) -> Micros {
        let d = sender_d.max(self.current_d()).max(1);
        compute_bound(d, &self.params.bound_config()).expect("d is positive")
    }

    /// Rank among possible relayers of `sender`'s messages (0 = first).
    fn relay_rank(&self, sender: NodeId) -> u64 {
        self.gmd
            .membership()
            .iter()
            .filter(|&&m| m != sender)
            .position(|&m| m == self.id())
            .unwrap_or(0) as u64
    }

    fn heard_from(&mut self, from: NodeId, now: SimTime, fx: &mut Vec<Effect<B>>) {
        if from == self.id() {
            return;
        }
        self.last_heard.insert(from, now);
        if self.suspected.contains(&from) {
            fx.push(Effect::Unsuspect(from));
            fx.extend(self.set_mode(ModeEvent::SuspicionFalse(from), now, None));
        }
    }

    /// Starts an insured broadcast: copy 1 now, copy 2 after `eta`.
    pub fn broadcast_insured(
        &mut self,
        payload: B,
        now: SimTime,
        clock: u64,
    ) -> Result<Vec<Effect<B>>, InsuranceError> {
        if self.params.mode == Mode::GmdOnly {
            return Err(InsuranceError::GmdOnlyMode);
        }
        let d_i = self.current_d();
        let m = self.gmd.broadcast(clock, payload);
        let copy = InsuranceMessage {
            id: m.id,
            ts: m.ts,
            d_i,
            copy_index: 1,
            relayed_by: None,
            payload: m.payload,
        };
        let mut fx = vec![
            Effect::Originated {
                id: copy.id,
                ts: copy.ts,
                d_i,
            },
            Effect::Broadcast(Wire::Msg(copy.clone())),
            Effect::Timer {
                after: self.params.eta_us,
                timer: Timer::SendCopy2(copy.id),
            },
        ];
        self.accept_new(copy, KnowVia::Own, now, clock, &mut fx);
        fx.extend(self.try_deliver_hybrid(now, clock));
        Ok(fx)
    }

    /// Handles any wire message from `from`.
    pub fn on_wire(
        &mut self,
        from: NodeId,
        wire: Wire<B>,
        now: SimTime,
        clock: u64,
    ) -> Vec<Effect<B>> {
        match wire {
            Wire::Msg(m) => self.on_receive_insured(from, m, KnowVia::Copy, now, clock),
            Wire::Relay(m) => self.on_receive_insured(from, m, KnowVia::Relay, now, clock),
            Wire::Retx { msg, .. } => {
                self.on_receive_insured(from, msg, KnowVia::Retransmission, now, clock)
            }
            Wire::Ack(a) => self.on_ack_insured(from, a, now, clock),
            Wire::RetxReq { missing, attempt } => {
                let mut fx = Vec::new();
                self.heard_from(from, now, &mut fx);
                if let Some(m) = self.held.get(&missing) {
                    let mut copy = m.clone();
                    copy.relayed_by = Some(self.id());
                    copy.copy_index = 1;
                    fx.push(Effect::Send(from, Wire::Retx { msg: copy, attempt }));
                }
                fx
            }
            Wire::Heartbeat { .. } => {
                let mut fx = Vec::new();
                self.heard_from(from, now, &mut fx);
                fx
            }
        }
    }

    /// Receipt of a copy, relay or retransmission of an insured message.
    pub fn on_receive_insured(
        &mut self,
        from: NodeId,
        msg: InsuranceMessage<B>,
        via: KnowVia,
        now: SimTime,
        clock: u64,
    ) -> Vec<Effect<B>> {
        let mut fx = Vec::new();
        self.heard_from(from, now, &mut fx);
        let id = msg.id;
        // Observed only after this message's own deadline is fixed: the bound
        // predicts a delay, it must not absorb the delay it is guarding.
        let sample = (via == KnowVia::Copy && from == id.sender).then(|| {
            let sent_at = msg.ts
                + if msg.copy_index == 2 {
                    self.params.eta_us
                } else {
                    0
                };
            DelaySample::from_timestamps(from, self.id(), sent_at, clock)
        });
        let completes = via == KnowVia::Relay || (via == KnowVia::Copy && msg.copy_index == 2);
        if via == KnowVia::Relay && msg.relayed_by != Some(self.id()) {
            self.relays_seen.insert(id);
            self.relay_pending.remove(&id);
        }
        if completes {
            self.second_copy_timers.remove(&id);
        }
        if self.gmd.knows(id) || self.abandoned.contains(&(id.sender, id.seq)) {
            if let Some(s) = sample {
                let _ = self.estimator.observe(s);
            }
            return fx;
        }
        let first_copy_only = via == KnowVia::Copy && msg.copy_index == 1 && from == id.sender;
        if first_copy_only && !self.relays_seen.contains(&id) {
            let wait = self.params.eta_us
                + self.params.theta_us
                + self.relay_rank(id.sender) * self.params.theta_us;
            self.second_copy_timers.insert(id, now + wait);
            fx.push(Effect::Timer {
                after: wait,
                timer: Timer::RelayCheck(id),
            });
        }
        self.accept_new(msg, via, now, clock, &mut fx);
        if let Some(s) = sample {
            let _ = self.estimator.observe(s);
        }
        fx.extend(self.try_deliver_hybrid(now, clock));
        fx
    }

    /// First sight of a message: knowledge, gaps, GMD receipt, ack, deadline.
    fn accept_new(
        &mut self,
        msg: InsuranceMessage<B>,
        via: KnowVia,
        now: SimTime,
        clock: u64,
        fx: &mut Vec<Effect<B>>,
    ) {
        let id = msg.id;
        let source = msg.relayed_by.unwrap_or(id.sender);
        self.learn_up_to(id.sender, id.seq, Some(source), via, now, false, fx);
        self.gaps.remove(&(id.sender, id.seq));
        self.gap_sources.remove(&(id.sender, id.seq));
        self.gap_attempts.remove(&(id.sender, id.seq));
        self.sender_ts
            .entry(id.sender)
            .or_default()
            .insert(id.seq, msg.ts);
        if self.params.mode != Mode::GmdOnly {
            let bound = self.bound_for(msg.d_i);
            self.deadlines.insert(
                id,
                DeadlineInfo {
                    deadline: msg.ts + bound + self.params.epsilon_us,
                    bound,
                },
            );
        }
        let gm = GmdMessage {
            id,
            ts: msg.ts,
            payload: msg.payload.clone(),
        };
        self.held.insert(id, msg);
        if let Some(ack) = self.gmd.on_receive(gm, clock) {
            fx.push(Effect::Broadcast(Wire::Ack(InsuranceAck {
                acker: ack.acker,
                acked_msg: ack.acked_msg,
                acker_ts: ack.acker_ts,
                seen: self.gmd.seen().clone(),
            })));
        }
    }

    /// Records that `sender` has broadcast at least `seq` messages. Newly
    /// known sequence numbers produce `Know` effects; unreceived ones become
    /// gaps.
    #[allow(clippy::too_many_arguments)]
    fn learn_up_to(
        &mut self,
        sender: NodeId,
        seq: u64,
        source: Option<NodeId>,
        via: KnowVia,
        _now: SimTime,
        from_vector: bool,
        fx: &mut Vec<Effect<B>>,
    ) {
        if sender == self.id() {
            if via == KnowVia::Own {
                self.known_max.insert(sender, seq);
                fx.push(Effect::Know {
                    id: MsgId::new(sender, seq),
                    via,
                });
            }
            return;
        }
        let known = self.known_max.get(&sender).copied().unwrap_or(0);
        for q in (known + 1)..=seq {
            let kv = if q == seq { via } else { KnowVia::SeenVector };
            fx.push(Effect::Know {
                id: MsgId::new(sender, q),
                via: kv,
            });
        }
        if seq > known {
            self.known_max.insert(sender, seq);
        }
        let low = self.gmd.seen().get(sender) + 1;
        let upper = if via == KnowVia::SeenVector {
            seq
        } else {
            seq.saturating_sub(1)
        };
        for q in low..=upper {
            if self.gmd.has_received(sender, q) || self.abandoned.contains(&(sender, q)) {
                continue;
            }
            let key = (sender, q);
            let fresh = self.gaps.insert(key);
            if let Some(src) = source {
                if src != self.id() {
                    self.gap_sources.entry(key).or_default().insert(src);
                }
            }
            if fresh {
                // The copy is usually still in flight: ask the acker only once
                // a p99 delay has passed, and give a sequence gap time for
                // the second copy as well.
                let grace = if from_vector {
                    self.params.theta_us
                } else {
                    self.params.eta_us + self.params.theta_us
                };
                fx.push(Effect::Timer {
                    after: grace,
                    timer: Timer::GapRetry { sender, seq: q },
                });
            }
        }
    }

    /// Handles an ack: feeds the all-ack state and detects gaps from the
    /// acker's receipt vector.
    pub fn on_ack_insured(
        &mut self,
        from: NodeId,
        ack: InsuranceAck,
        now: SimTime,
        clock: u64,
    ) -> Vec<Effect<B>> {
        let mut fx = Vec::new();
        self.heard_from(from, now, &mut fx);
        if from == ack.acker && from != self.id() {
            let sample = DelaySample::from_timestamps(from, self.id(), ack.acker_ts, clock);
            let _ = self.estimator.observe(sample);
        }
        self.gmd.on_ack(&GmdAck {
            acker: ack.acker,
            acked_msg: ack.acked_msg,
            acker_ts: ack.acker_ts,
            acker_seq: ack.seen.get(ack.acker),
        });
        let am = ack.acked_msg;
        if !self.gmd.knows(am) {
            self.learn_up_to(
                am.sender,
                am.seq,
                Some(ack.acker),
                KnowVia::SeenVector,
                now,
                true,
                &mut fx,
            );
        }
        for (sender, w) in ack.seen.iter() {
            if w > self.gmd.seen().get(sender) {
                self.learn_up_to(
                    sender,
                    w,
                    Some(ack.acker),
                    KnowVia::SeenVector,
                    now,
                    true,
                    &mut fx,
                );
            }
        }
        fx.extend(self.try_deliver_hybrid(now, clock));
        fx
    }

    /// Timer dispatch.
    pub fn on_timer(&mut self, timer: Timer, now: SimTime, clock: u64) -> Vec<Effect<B>> {
        match timer {
            Timer::SendCopy2(id) => {
                let mut fx = Vec::new();
                if let Some(m) = self.held.get(&id) {
                    let mut c2 = m.clone();
                    c2.copy_index = 2;
                    fx.push(Effect::Broadcast(Wire::Msg(c2)));
                }
                fx
            }
            Timer::RelayCheck(id) => self.on_second_copy_timeout(id, now),
            Timer::RelayCopy2(id) => {
                let mut fx = Vec::new();
                if let Some(m) = self.held.get(&id) {
                    let mut c2 = m.clone();
                    c2.copy_index = 2;
                    c2.relayed_by = Some(self.id());
                    fx.push(Effect::Broadcast(Wire::Relay(c2)));
                }
                fx
            }
            Timer::GapRetry { sender, seq } => self.on_gap_retry(sender, seq),
            Timer::Wake => {
                self.armed_wake = None;
                self.try_deliver_hybrid(now, clock)
            }
            Timer::Heartbeat => {
                self.beats += 1;
                vec![
                    Effect::Broadcast(Wire::Heartbeat { beat: self.beats }),
                    Effect::Timer {
                        after: self.params.heartbeat_interval_us,
                        timer: Timer::Heartbeat,
                    },
                ]
            }
            Timer::SuspicionCheck => {
                let mut fx = Vec::new();
                let late: Vec<NodeId> = self
                    .gmd
                    .membership()
                    .iter()
                    .copied()
                    .filter(|&m| m != self.id() && !self.suspected.contains(&m))
                    .filter(|m| {
                        now.saturating_sub(self.last_heard.get(m).copied().unwrap_or(0))
                            >= self.params.suspicion_timeout_us
                    })
                    .collect();
                for m in late {
                    fx.push(Effect::Suspect(m));
                    fx.extend(self.set_mode(ModeEvent::Suspect(m), now, Some(clock)));
                }
                fx.push(Effect::Timer {
                    after: self.params.heartbeat_interval_us,
                    timer: Timer::SuspicionCheck,
                });
                fx
            }
        }
    }

    /// Second copy did not show up in time: relay both copies on the
    /// sender's behalf unless someone else already did.
    pub fn on_second_copy_timeout(&mut self, id: MsgId, _now: SimTime) -> Vec<Effect<B>> {
        if self.second_copy_timers.remove(&id).is_none() || self.relays_seen.contains(&id) {
            return Vec::new();
        }
        let Some(m) = self.held.get(&id) else {
            return Vec::new();
        };
        let mut c1 = m.clone();
        c1.copy_index = 1;
        c1.relayed_by = Some(self.id());
        self.relay_pending.insert(id);
        vec![
            Effect::Broadcast(Wire::Relay(c1)),
            Effect::Timer {
                after: self.params.eta_us,
                timer: Timer::RelayCopy2(id),
            },
        ]
    }

    fn on_gap_retry(&mut self, sender: NodeId, seq: u64) -> Vec<Effect<B>> {
        let key = (sender, seq);
        if !self.gaps.contains(&key) {
            return Vec::new();
        }
        let attempt = self.gap_attempts.get(&key).copied().unwrap_or(0);
        let mut candidates: Vec<NodeId> = self
            .gap_sources
            .get(&key)
            .map(|s| {
                s.iter()
                    .copied()
                    .filter(|n| !self.suspected.contains(n))
                    .collect()
            })
            .unwrap_or_default();
        if candidates.is_empty() && sender != self.id() {
            candidates.push(sender);
        }
        let mut fx = Vec::new();
        if !candidates.is_empty() {
            let target = candidates[attempt as usize % candidates.len()];
            fx.push(Effect::Send(
                target,
                Wire::RetxReq {
                    missing: MsgId::new(sender, seq),
                    attempt,
                },
            ));
        }
        self.gap_attempts.insert(key, attempt + 1);
        fx.push(Effect::Timer {
            after: self.params.theta_us.max(1),
            timer: Timer::GapRetry { sender, seq },
        });
        fx
    }

    /// Lower bound (exclusive) on the timestamp of the missing `(sender, seq)`.
    fn gap_lower_ts(&self, sender: NodeId, seq: u64) -> Timestamp {
        self.sender_ts
            .get(&sender)
            .and_then(|m| m.range(..seq).next_back().map(|(_, &ts)| ts))
            .unwrap_or(0)
    }

    /// Whether some known gap could hold a message ordered before `(ts, sender)`.
    fn blocked_by_gap(&self, ts: Timestamp, sender: NodeId) -> bool {
        self.gaps
            .iter()
            .any(|&(s, q)| (self.gap_lower_ts(s, q) + 1, s) < (ts, sender))
    }

    /// Delivers pending messages in `(ts, sender)` order by the all-ack rule
    /// or, when armed, by the local-clock deadline.
    pub fn try_deliver_hybrid(&mut self, _now: SimTime, clock: u64) -> Vec<Effect<B>> {
        let mut fx = Vec::new();
        let armed = self.deadlines_armed();
        let mut first = true;
        while let Some(head) = self.gmd.head() {
            let (id, ts) = (head.msg.id, head.msg.ts);
            let info = self.deadlines.get(&id).copied();
            let gmd_ok = self.gmd.gmd_ready(head);
            // A missing message from a member whose promise exceeds `ts` would
            // already have a larger timestamp, so gaps only gate the deadline rule.
            if !gmd_ok && !self.gaps.is_empty() && self.blocked_by_gap(ts, id.sender) {
                if info.is_some_and(|i| clock >= i.deadline) {
                    self.gap_blocked.insert(id);
                }
                break;
            }
            let path = if gmd_ok {
                DeliveryPath::Gmd
            } else if armed && info.is_some_and(|i| clock >= i.deadline) {
                DeliveryPath::Deadline
            } else {
                if armed {
                    if let Some(i) = info {
                        if self.armed_wake.is_none_or(|w| w > i.deadline) {
                            self.armed_wake = Some(i.deadline);
                            fx.push(Effect::WakeAt { local: i.deadline });
                        }
                    }
                }
                break;
            };
            let msg = self.gmd.pop_head().expect("head exists");
            let postponed = match (path, info) {
                (DeliveryPath::Deadline, Some(i)) if clock > i.deadline + EVENT_STEP_US => {
                    if self.gap_blocked.contains(&id) {
                        Postponement::Gap
                    } else if !first {
                        Postponement::Order
                    } else if self.resyncing {
                        Postponement::Resync
                    } else {
                        Postponement::LateArrival
                    }
                }
                _ => Postponement::None,
            };
            self.gap_blocked.remove(&id);
            self.deadlines.remove(&id);
            fx.push(Effect::Deliver(Delivery {
                msg,
                path,
                clock,
                deadline: info.map(|i| i.deadline),
                bound: info.map(|i| i.bound),
                postponed,
            }));
            first = false;
        }
        fx
    }

    /// Re-evaluates deliveries after the local clock was stepped by a resync.
    pub fn on_resync(&mut self, now: SimTime, clock: u64) -> Vec<Effect<B>> {
        self.resyncing = true;
        self.armed_wake = None;
        let fx = self.try_deliver_hybrid(now, clock);
        self.resyncing = false;
        fx
    }

    /// Mode controller. `clock` triggers a delivery re-evaluation when given.
    pub fn set_mode(
        &mut self,
        event: ModeEvent,
        now: SimTime,
        clock: Option<u64>,
    ) -> Vec<Effect<B>> {
        match event {
            ModeEvent::Suspect(n) => {
                if n != self.id() && self.suspected.insert(n) {
                    self.suspicions.push(Suspicion {
                        suspect: n,
                        raised_at: now,
                        cleared_at: None,
                    });
                }
            }
            ModeEvent::SuspicionFalse(n) => {
                if self.suspected.remove(&n) {
                    if let Some(s) = self
                        .suspicions
                        .iter_mut()
                        .rev()
                        .find(|s| s.suspect == n && s.cleared_at.is_none())
                    {
                        s.cleared_at = Some(now.max(s.raised_at + 1));
                    }
                }
                if !self.deadlines_armed() {
                    self.armed_wake = None;
                }
            }
            ModeEvent::NewView(n) => {
                self.gmd.remove_member(n);
                self.suspected.remove(&n);
                let orphaned: Vec<(NodeId, u64)> = self
                    .gaps
                    .iter()
                    .copied()
                    .filter(|&(s, q)| {
                        s == n
                            && self
                                .gap_sources
                                .get(&(s, q))
                                .is_none_or(|src| src.iter().all(|&x| x == n))
                    })
                    .collect();
                for g in orphaned {
                    self.gaps.remove(&g);
                    self.gap_sources.remove(&g);
                    self.abandoned.insert(g);
                }
            }
        }
        match clock {
            Some(c) => self.try_deliver_hybrid(now, c),
            None => Vec::new(),
        }
    }
}
