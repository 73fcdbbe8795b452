//! Seeded single-threaded discrete-event engine.
//!
//! The kernel owns simulated time, the event queue, per-node clocks, the
//! network model, crash state and the trace. Protocol code never touches the
//! queue directly: a handler passed to [`Kernel::run_until`] receives each
//! event together with `&mut Kernel` and reacts through [`Kernel::send`],
//! [`Kernel::set_timer`] and friends.
//!
//! Network delays are drawn from a generator keyed by
//! `(seed, from, to, payload.delay_key())`, so a message gets the same delay
//! no matter what other traffic a protocol variant generates. Payloads that
//! are legitimately re-sent must fold an attempt number into their key.

mod clock;
mod network;
pub mod trace;

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use clock::NodeClock;
pub use network::{DelayDist, DelayShift, NetworkModel};
pub use trace::{Detail, Trace, TraceRecord, TRACE_HEADER};

use crate::{Micros, NodeId, SimTime};

/// Something the kernel can carry in an event.
pub trait Payload: Clone {
    /// Message kind written to the trace for sends (e.g. `INS_MSG`).
    fn kind(&self) -> &'static str;
    /// Value for the trace `msg_id` column.
    fn trace_id(&self) -> String;
    /// Stable identity used to key the delay generator; distinct sends on
    /// the same channel should have distinct keys.
    fn delay_key(&self) -> u64;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    MessageArrival { from: NodeId },
    TimerFire,
    ClientRequest,
    Crash,
}

#[derive(Debug, Clone)]
pub struct SimEvent<P> {
    pub fire_time: SimTime,
    pub target: NodeId,
    pub kind: EventKind,
    pub payload: Option<P>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KernelError {
    #[error("node {0} has crashed")]
    Crashed(NodeId),
    #[error("node {0} is not registered")]
    UnknownNode(NodeId),
    #[error("clock sync of node {node} failed after {attempts} attempts")]
    SyncFailed { node: NodeId, attempts: u32 },
}

struct Queued<P> {
    event: SimEvent<P>,
    seq: u64,
}

impl<P> Queued<P> {
    fn key(&self) -> (SimTime, NodeId, u64) {
        (self.event.fire_time, self.event.target, self.seq)
    }
}

impl<P> PartialEq for Queued<P> {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}
impl<P> Eq for Queued<P> {}
impl<P> PartialOrd for Queued<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<P> Ord for Queued<P> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key().cmp(&other.key())
    }
}

#[derive(Debug, Clone)]
struct NodeSlot {
    clock: NodeClock,
    crashed_at: Option<SimTime>,
    busy_until: SimTime,
    sync_rounds: u64,
}

/// splitmix64 finalizer used to derive independent sub-seeds.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub struct Kernel<P> {
    seed: u64,
    now: SimTime,
    queue: BinaryHeap<Reverse<Queued<P>>>,
    next_seq: u64,
    nodes: Vec<NodeSlot>,
    network: NetworkModel,
    trace: Trace,
    sends: u64,
    record_sends: bool,
}

impl<P: Payload> Kernel<P> {
    pub fn new(seed: u64, network: NetworkModel) -> Self {
        Self {
            seed,
            now: 0,
            queue: BinaryHeap::new(),
            next_seq: 0,
            nodes: Vec::new(),
            network,
            trace: Trace::new(),
            sends: 0,
            record_sends: true,
        }
    }

    /// Registers a node; ids are assigned densely from 0.
    pub fn add_node(&mut self, offset_us: i64, drift_ppm: i64) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(NodeSlot {
            clock: NodeClock::new(id, offset_us, drift_ppm),
            crashed_at: None,
            busy_until: 0,
            sync_rounds: 0,
        });
        id
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn network(&self) -> &NetworkModel {
        &self.network
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn into_trace(self) -> Trace {
        self.trace
    }

    /// Total point-to-point sends attempted (dropped ones included).
    /// Whether successful sends get a trace record (drops always do).
    pub fn set_record_sends(&mut self, on: bool) {
        self.record_sends = on;
    }

    pub fn send_count(&self) -> u64 {
        self.sends
    }

    pub fn pending_events(&self) -> usize {
        self.queue.len()
    }

    pub fn record(
        &mut self,
        node: NodeId,
        kind: &str,
        msg_id: impl Into<String>,
        detail: impl Into<String>,
    ) {
        self.trace.push(self.now, node, kind, msg_id, detail);
    }

    fn slot(&self, node: NodeId) -> Result<&NodeSlot, KernelError> {
        self.nodes
            .get(node.0 as usize)
            .ok_or(KernelError::UnknownNode(node))
    }

    fn slot_mut(&mut self, node: NodeId) -> Result<&mut NodeSlot, KernelError> {
        self.nodes
            .get_mut(node.0 as usize)
            .ok_or(KernelError::UnknownNode(node))
    }

    pub fn is_crashed(&self, node: NodeId) -> bool {
        self.slot(node)
            .map(|s| s.crashed_at.is_some())
            .unwrap_or(true)
    }

    pub fn crashed_at(&self, node: NodeId) -> Option<SimTime> {
        self.slot(node).ok().and_then(|s| s.crashed_at)
    }

    pub fn clock(&self, node: NodeId) -> Result<&NodeClock, KernelError> {
        self.slot(node).map(|s| &s.clock)
    }

    /// Local clock reading of `node` at the current simulated time.
    pub fn read_clock(&self, node: NodeId) -> Result<u64, KernelError> {
        let s = self.slot(node)?;
        if s.crashed_at.is_some() {
            return Err(KernelError::Crashed(node));
        }
        Ok(s.clock.reading(self.now))
    }

    /// Simulated time at which `node`'s clock will read `local`, not earlier
    /// than now.
    pub fn sim_time_for_local(&self, node: NodeId, local: u64) -> Result<SimTime, KernelError> {
        Ok(self.slot(node)?.clock.sim_time_at(self.now, local))
    }

    fn push(&mut self, event: SimEvent<P>) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Reverse(Queued { event, seq }));
    }

    fn delay_rng(&self, from: NodeId, to: NodeId, key: u64) -> ChaCha8Rng {
        let s = mix(mix(mix(self.seed, from.0 as u64), to.0 as u64), key);
        ChaCha8Rng::seed_from_u64(s)
    }

    /// Sends `msg` from `from` to `to`. Returns the arrival time, or `None`
    /// when the network dropped it. Self-sends arrive 1 us later and are
    /// never dropped.
    pub fn send(
        &mut self,
        from: NodeId,
        to: NodeId,
        msg: P,
    ) -> Result<Option<SimTime>, KernelError> {
        let s = self.slot(from)?;
        if s.crashed_at.is_some() {
            return Err(KernelError::Crashed(from));
        }
        self.slot(to)?;
        self.sends += 1;
        let (delay, dropped) = if from == to {
            (1, false)
        } else {
            let mut rng = self.delay_rng(from, to, msg.delay_key());
            let delay = self.network.delay_at(self.now).sample(&mut rng);
            let p = self.network.drop_prob;
            let dropped = p > 0.0 && rng.random_bool(p.min(1.0));
            (delay, dropped)
        };
        if dropped {
            let detail = Detail::new().kv("kind", msg.kind()).kv("to", to).build();
            self.trace
                .push(self.now, from, trace::kinds::DROP, msg.trace_id(), detail);
            return Ok(None);
        }
        let at = self.now + delay;
        if self.record_sends {
            let detail = Detail::new().kv("to", to).kv("delay", delay).build();
            self.trace
                .push(self.now, from, msg.kind(), msg.trace_id(), detail);
        }
        self.push(SimEvent {
            fire_time: at,
            target: to,
            kind: EventKind::MessageArrival { from },
            payload: Some(msg),
        });
        Ok(Some(at))
    }

    /// Sends a copy of `msg` to every node in `to` except `from`, sampling
    /// each delay independently. Returns the scheduled arrivals.
    pub fn broadcast(
        &mut self,
        from: NodeId,
        to: &[NodeId],
        msg: &P,
    ) -> Result<Vec<SimTime>, KernelError> {
        if self.is_crashed(from) {
            return Err(KernelError::Crashed(from));
        }
        let mut arrivals = Vec::with_capacity(to.len());
        for &dst in to {
            if dst == from {
                continue;
            }
            if let Some(at) = self.send(from, dst, msg.clone())? {
                arrivals.push(at);
            }
        }
        Ok(arrivals)
    }

    pub fn set_timer(&mut self, node: NodeId, after: Micros, payload: P) -> SimTime {
        let at = self.now + after;
        self.set_timer_at(node, at, payload)
    }

    pub fn set_timer_at(&mut self, node: NodeId, at: SimTime, payload: P) -> SimTime {
        let at = at.max(self.now);
        self.push(SimEvent {
            fire_time: at,
            target: node,
            kind: EventKind::TimerFire,
            payload: Some(payload),
        });
        at
    }

    pub fn schedule_client_request(&mut self, node: NodeId, at: SimTime, payload: P) {
        self.push(SimEvent {
            fire_time: at.max(self.now),
            target: node,
            kind: EventKind::ClientRequest,
            payload: Some(payload),
        });
    }

    pub fn schedule_crash(&mut self, node: NodeId, at: SimTime) {
        self.push(SimEvent {
            fire_time: at.max(self.now),
            target: node,
            kind: EventKind::Crash,
            payload: None,
        });
    }

    /// Cristian-style synchronization of `node` against `reference`.
    ///
    /// Each attempt draws a request and a reply delay; an attempt whose
    /// half round trip is within `bound_us` sets the node's clock to the
    /// reference reading taken when the request arrived plus half the round
    /// trip. The achieved accuracy (half round trip, rounded up) is returned.
    pub fn sync_clock_probabilistic(
        &mut self,
        node: NodeId,
        reference: NodeId,
        bound_us: Micros,
        max_attempts: u32,
    ) -> Result<Micros, KernelError> {
        if self.is_crashed(node) {
            return Err(KernelError::Crashed(node));
        }
        if self.is_crashed(reference) {
            return Err(KernelError::Crashed(reference));
        }
        let round = {
            let s = self.slot_mut(node)?;
            s.sync_rounds += 1;
            s.sync_rounds
        };
        let now = self.now;
        for attempt in 0..max_attempts {
            let key = mix(mix(0x5359_4e43, round), attempt as u64);
            let dist = self.network.delay_at(now).clone();
            let d_req = dist.sample(&mut self.delay_rng(node, reference, key));
            let d_rep = dist.sample(&mut self.delay_rng(reference, node, key));
            let rtt = d_req + d_rep;
            let half = rtt.div_ceil(2);
            if half <= bound_us {
                let ref_reading = self
                    .slot(reference)?
                    .clock
                    .reading_signed(now.saturating_sub(d_rep));
                let s = self.slot_mut(node)?;
                s.clock
                    .set_reading(now, ref_reading + (rtt / 2) as i64, half);
                let err = s.clock.error(now);
                let detail = Detail::new()
                    .kv("acc", half)
                    .kv("err", err)
                    .kv("drift_ppm", s.clock.drift_ppm)
                    .kv("attempts", attempt + 1)
                    .build();
                self.trace.push(now, node, trace::kinds::SYNC, "", detail);
                return Ok(half);
            }
        }
        self.slot_mut(node)?.clock.synchronized = false;
        let detail = Detail::new()
            .kv("attempts", max_attempts)
            .kv("bound", bound_us)
            .build();
        self.trace
            .push(now, node, trace::kinds::SYNC_FAIL, "", detail);
        Err(KernelError::SyncFailed {
            node,
            attempts: max_attempts,
        })
    }

    /// Processes every event with `fire_time <= end` in (time, target,
    /// insertion) order and returns how many reached the handler. Events
    /// addressed to crashed nodes are discarded. Time is left at `end`.
    pub fn run_until<F>(&mut self, end: SimTime, mut handler: F) -> usize
    where
        F: FnMut(&mut Kernel<P>, SimEvent<P>),
    {
        let mut processed = 0;
        while let Some(Reverse(top)) = self.queue.peek() {
            if top.event.fire_time > end {
                break;
            }
            let Reverse(Queued { event, .. }) = self.queue.pop().expect("peeked");
            self.now = event.fire_time;
            let idx = event.target.0 as usize;
            let Some(slot) = self.nodes.get_mut(idx) else {
                continue;
            };
            if slot.crashed_at.is_some() {
                continue;
            }
            match event.kind {
                EventKind::Crash => {
                    slot.crashed_at = Some(self.now);
                    self.trace
                        .push(self.now, event.target, trace::kinds::CRASH, "", "");
                }
                EventKind::MessageArrival { .. } if self.network.processing_us > 0 => {
                    if slot.busy_until > self.now {
                        let at = slot.busy_until;
                        self.push(SimEvent {
                            fire_time: at,
                            ..event
                        });
                        continue;
                    }
                    slot.busy_until = self.now + self.network.processing_us;
                }
                _ => {}
            }
            processed += 1;
            handler(self, event);
        }
        self.now = self.now.max(end);
        processed
    }

    /// Appends the END record; call once after the last `run_until`.
    pub fn finish(&mut self) {
        let detail = Detail::new().kv("nodes", self.nodes.len()).build();
        self.trace
            .push(self.now, NodeId(0), trace::kinds::END, "", detail);
    }
}
