//! Group-membership-dependent atomic broadcast.
//!
//! A sender timestamps its message with a hybrid clock; every recipient
//! (the sender included) broadcasts an ack whose timestamp is a promise that
//! its future broadcasts will carry larger timestamps. A message is delivered
//! once every member has acked it and every member's promise exceeds its
//! timestamp, in `(ts, sender)` order. Nothing is delivered while a member
//! stays silent, which is how a crashed member blocks the group until it is
//! removed from the membership.
//!
//! Acks carry the acker's own broadcast count. A promise only counts once all
//! of the acker's earlier messages have been received, so the rule does not
//! depend on FIFO channels.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use crate::{MsgId, NodeId, SeqVector, Timestamp};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GmdMessage<B> {
    pub id: MsgId,
    pub ts: Timestamp,
    pub payload: B,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GmdAck {
    pub acker: NodeId,
    pub acked_msg: MsgId,
    /// Promise: every later broadcast by `acker` has a larger timestamp.
    pub acker_ts: Timestamp,
    /// Number of messages `acker` had broadcast when it acked.
    pub acker_seq: u64,
}

#[derive(Debug, Clone)]
pub(crate) struct Pending<B> {
    pub(crate) msg: GmdMessage<B>,
    pub(crate) acks: BTreeSet<NodeId>,
}

#[derive(Debug, Clone)]
pub struct GmdNodeState<B> {
    id: NodeId,
    membership: BTreeSet<NodeId>,
    hybrid_clock: Timestamp,
    next_seq: u64,
    pending: BTreeMap<(Timestamp, NodeId), Pending<B>>,
    pending_index: HashMap<MsgId, Timestamp>,
    delivered: Vec<MsgId>,
    delivered_set: HashSet<MsgId>,
    early_acks: HashMap<MsgId, BTreeSet<NodeId>>,
    promises: BTreeMap<NodeId, Timestamp>,
    held_promises: BTreeMap<NodeId, Vec<(u64, Timestamp)>>,
    contiguous: SeqVector,
    above: BTreeMap<NodeId, BTreeSet<u64>>,
    max_acked_ts: Option<Timestamp>,
}

impl<B: Clone> GmdNodeState<B> {
    pub fn new(id: NodeId, membership: impl IntoIterator<Item = NodeId>) -> Self {
        Self {
            id,
            membership: membership.into_iter().collect(),
            hybrid_clock: 0,
            next_seq: 0,
            pending: BTreeMap::new(),
            pending_index: HashMap::new(),
            delivered: Vec::new(),
            delivered_set: HashSet::new(),
            early_acks: HashMap::new(),
            promises: BTreeMap::new(),
            held_promises: BTreeMap::new(),
            contiguous: SeqVector::new(),
            above: BTreeMap::new(),
            max_acked_ts: None,
        }
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn membership(&self) -> &BTreeSet<NodeId> {
        &self.membership
    }

    pub fn hybrid_clock(&self) -> Timestamp {
        self.hybrid_clock
    }

    /// Messages this node has broadcast so far.
    pub fn broadcast_count(&self) -> u64 {
        self.next_seq
    }

    pub fn delivered(&self) -> &[MsgId] {
        &self.delivered
    }

    pub fn is_delivered(&self, id: MsgId) -> bool {
        self.delivered_set.contains(&id)
    }

    pub fn is_pending(&self, id: MsgId) -> bool {
        self.pending_index.contains_key(&id)
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    /// Pending messages in `(ts, sender)` order.
    pub fn pending(&self) -> impl Iterator<Item = &GmdMessage<B>> {
        self.pending.values().map(|p| &p.msg)
    }

    pub fn pending_msg(&self, id: MsgId) -> Option<&GmdMessage<B>> {
        let ts = *self.pending_index.get(&id)?;
        self.pending.get(&(ts, id.sender)).map(|p| &p.msg)
    }

    /// Last contiguously received sequence number per sender.
    pub fn seen(&self) -> &SeqVector {
        &self.contiguous
    }

    /// Effective promise of `member`, if any.
    pub fn promise(&self, member: NodeId) -> Option<Timestamp> {
        self.promises.get(&member).copied()
    }

    /// Largest message timestamp this node has acked.
    pub fn max_acked_ts(&self) -> Option<Timestamp> {
        self.max_acked_ts
    }

    /// `max(clock, hybrid_clock + 1)`; advances the hybrid clock.
    pub fn assign_timestamp(&mut self, clock: u64) -> Timestamp {
        let ts = clock.max(self.hybrid_clock + 1);
        self.hybrid_clock = ts;
        ts
    }

    /// Lamport update on learning of a foreign timestamp.
    pub fn observe_timestamp(&mut self, ts: Timestamp) {
        self.hybrid_clock = self.hybrid_clock.max(ts);
    }

    /// Creates this node's next message. The caller delivers it to itself
    /// through [`Self::on_receive`] like any other recipient.
    pub fn broadcast(&mut self, clock: u64, payload: B) -> GmdMessage<B> {
        self.next_seq += 1;
        let ts = self.assign_timestamp(clock);
        GmdMessage {
            id: MsgId::new(self.id, self.next_seq),
            ts,
            payload,
        }
    }

    /// Whether `id` has been received (pending or delivered).
    pub fn knows(&self, id: MsgId) -> bool {
        self.pending_index.contains_key(&id) || self.delivered_set.contains(&id)
    }

    /// Records receipt of a sequence number; returns false if it was already
    /// received.
    pub(crate) fn mark_received(&mut self, id: MsgId) -> bool {
        let w = self.contiguous.get(id.sender);
        if id.seq <= w {
            return false;
        }
        let above = self.above.entry(id.sender).or_default();
        if !above.insert(id.seq) {
            return false;
        }
        let mut w = w;
        while above.remove(&(w + 1)) {
            w += 1;
        }
        self.contiguous.raise(id.sender, w);
        self.release_promises(id.sender);
        true
    }

    /// Whether `seq` from `sender` has been received.
    pub fn has_received(&self, sender: NodeId, seq: u64) -> bool {
        seq <= self.contiguous.get(sender)
            || self.above.get(&sender).is_some_and(|s| s.contains(&seq))
    }

    /// Highest sequence number received from `sender`, contiguous or not.
    pub fn max_received(&self, sender: NodeId) -> u64 {
        let w = self.contiguous.get(sender);
        self.above
            .get(&sender)
            .and_then(|s| s.last().copied())
            .map_or(w, |m| m.max(w))
    }

    fn release_promises(&mut self, member: NodeId) {
        let w = self.contiguous.get(member);
        let Some(held) = self.held_promises.get_mut(&member) else {
            return;
        };
        let mut best = None;
        held.retain(|&(need, ts)| {
            if need <= w {
                best = best.max(Some(ts));
                false
            } else {
                true
            }
        });
        if let Some(ts) = best {
            let p = self.promises.entry(member).or_insert(0);
            *p = (*p).max(ts);
        }
    }

    /// Handles a received message. Returns the ack to broadcast, or `None`
    /// for a duplicate.
    pub fn on_receive(&mut self, msg: GmdMessage<B>, clock: u64) -> Option<GmdAck> {
        if self.knows(msg.id) {
            return None;
        }
        self.mark_received(msg.id);
        self.observe_timestamp(msg.ts);
        let id = msg.id;
        let ts = msg.ts;
        let acks = self.early_acks.remove(&id).unwrap_or_default();
        self.pending_index.insert(id, ts);
        self.pending.insert((ts, id.sender), Pending { msg, acks });
        self.max_acked_ts = self.max_acked_ts.max(Some(ts));
        let acker_ts = self.assign_timestamp(clock);
        let ack = GmdAck {
            acker: self.id,
            acked_msg: id,
            acker_ts,
            acker_seq: self.next_seq,
        };
        self.on_ack(&ack);
        Some(ack)
    }

    /// Records an ack (from any node, this one included).
    pub fn on_ack(&mut self, ack: &GmdAck) {
        if ack.acker_seq <= self.contiguous.get(ack.acker) {
            let p = self.promises.entry(ack.acker).or_insert(0);
            *p = (*p).max(ack.acker_ts);
        } else {
            self.held_promises
                .entry(ack.acker)
                .or_default()
                .push((ack.acker_seq, ack.acker_ts));
        }
        if self.delivered_set.contains(&ack.acked_msg) {
            return;
        }
        match self.pending_index.get(&ack.acked_msg) {
            Some(&ts) => {
                if let Some(p) = self.pending.get_mut(&(ts, ack.acked_msg.sender)) {
                    p.acks.insert(ack.acker);
                }
            }
            None => {
                self.early_acks
                    .entry(ack.acked_msg)
                    .or_default()
                    .insert(ack.acker);
            }
        }
    }

    /// All-ack rule for a pending entry: acks from every member and every
    /// member's promise beyond the message timestamp.
    pub(crate) fn gmd_ready(&self, p: &Pending<B>) -> bool {
        self.membership
            .iter()
            .all(|m| p.acks.contains(m) && self.promises.get(m).is_some_and(|&pr| pr > p.msg.ts))
    }

    pub(crate) fn head(&self) -> Option<&Pending<B>> {
        self.pending.values().next()
    }

    pub(crate) fn pop_head(&mut self) -> Option<GmdMessage<B>> {
        let (_, p) = self.pending.pop_first()?;
        self.pending_index.remove(&p.msg.id);
        self.delivered_set.insert(p.msg.id);
        self.delivered.push(p.msg.id);
        Some(p.msg)
    }

    /// Whether the head message currently satisfies the all-ack rule.
    pub fn head_ready(&self) -> bool {
        self.head().is_some_and(|p| self.gmd_ready(p))
    }

    /// Delivers pending messages from the head while the all-ack rule holds.
    pub fn try_deliver(&mut self) -> Vec<GmdMessage<B>> {
        let mut out = Vec::new();
        while self.head_ready() {
            out.push(self.pop_head().expect("head exists"));
        }
        out
    }

    /// Installs a view without `node`.
    pub fn remove_member(&mut self, node: NodeId) {
        self.membership.remove(&node);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type State = GmdNodeState<()>;

    fn nodes(n: u32) -> Vec<NodeId> {
        (0..n).map(NodeId).collect()
    }

    #[test]
    fn physical_clock_dominates() {
        let mut s = State::new(NodeId(0), nodes(1));
        s.hybrid_clock = 500;
        assert_eq!(s.assign_timestamp(1000), 1000);
    }

    #[test]
    fn promise_dominates() {
        let mut s = State::new(NodeId(0), nodes(1));
        s.hybrid_clock = 1200;
        assert_eq!(s.assign_timestamp(1000), 1201);
        assert_eq!(s.assign_timestamp(1000), 1202);
    }

    #[test]
    fn ack_promises_beyond_message_ts() {
        let mut s = State::new(NodeId(1), nodes(3));
        s.hybrid_clock = 500;
        let m = GmdMessage {
            id: MsgId::new(NodeId(0), 1),
            ts: 700,
            payload: (),
        };
        let ack = s.on_receive(m.clone(), 0).unwrap();
        assert!(ack.acker_ts >= 701);
        assert!(s.hybrid_clock() >= 701);
        // duplicate: no ack, no change
        let before = s.hybrid_clock();
        assert_eq!(s.on_receive(m, 0), None);
        assert_eq!(s.hybrid_clock(), before);
    }

    #[test]
    fn ack_uses_physical_clock_when_ahead() {
        let mut s = State::new(NodeId(1), nodes(3));
        let m = GmdMessage {
            id: MsgId::new(NodeId(0), 1),
            ts: 700,
            payload: (),
        };
        assert!(s.on_receive(m, 9000).unwrap().acker_ts >= 9000);
    }

    fn ack(acker: u32, msg: MsgId, ts: Timestamp, seq: u64) -> GmdAck {
        GmdAck {
            acker: NodeId(acker),
            acked_msg: msg,
            acker_ts: ts,
            acker_seq: seq,
        }
    }

    #[test]
    fn delivers_fully_acked_head_only() {
        let mut s = State::new(NodeId(0), nodes(3));
        let m = GmdMessage {
            id: MsgId::new(NodeId(1), 1),
            ts: 5,
            payload: (),
        };
        let m2 = GmdMessage {
            id: MsgId::new(NodeId(2), 1),
            ts: 7,
            payload: (),
        };
        s.on_receive(m.clone(), 0);
        s.on_receive(m2.clone(), 0);
        s.on_ack(&ack(1, m.id, 6, 1));
        s.on_ack(&ack(2, m.id, 8, 1));
        let got: Vec<_> = s.try_deliver().into_iter().map(|x| x.id).collect();
        assert_eq!(got, vec![m.id]);
        assert!(s.is_pending(m2.id));
    }

    #[test]
    fn silent_member_blocks_forever() {
        let mut s = State::new(NodeId(0), nodes(3));
        let m = GmdMessage {
            id: MsgId::new(NodeId(1), 1),
            ts: 5,
            payload: (),
        };
        s.on_receive(m.clone(), 0);
        s.on_ack(&ack(1, m.id, 6, 1));
        assert!(s.try_deliver().is_empty());
        s.remove_member(NodeId(2));
        assert_eq!(s.try_deliver().len(), 1);
    }

    #[test]
    fn equal_ts_breaks_ties_by_sender() {
        let mut s = State::new(NodeId(0), [NodeId(0), NodeId(2), NodeId(5)]);
        let a = GmdMessage {
            id: MsgId::new(NodeId(5), 1),
            ts: 10,
            payload: (),
        };
        let b = GmdMessage {
            id: MsgId::new(NodeId(2), 1),
            ts: 10,
            payload: (),
        };
        s.on_receive(a.clone(), 0);
        s.on_receive(b.clone(), 0);
        for m in [a.id, b.id] {
            s.on_ack(&ack(2, m, 20, 1));
            s.on_ack(&ack(5, m, 20, 1));
        }
        let got: Vec<_> = s.try_deliver().into_iter().map(|x| x.id).collect();
        assert_eq!(got, vec![b.id, a.id]);
    }

    #[test]
    fn promise_held_until_ackers_messages_arrive() {
        // node 2 has sent one message (seq 1) we have not received; its
        // promise must not let a later-ts message through.
        let mut s = State::new(NodeId(0), nodes(3));
        let m = GmdMessage {
            id: MsgId::new(NodeId(1), 1),
            ts: 50,
            payload: (),
        };
        s.on_receive(m.clone(), 0);
        s.on_ack(&ack(1, m.id, 60, 1));
        s.on_ack(&ack(2, m.id, 60, 1));
        assert!(s.try_deliver().is_empty());
        let hidden = GmdMessage {
            id: MsgId::new(NodeId(2), 1),
            ts: 40,
            payload: (),
        };
        s.on_receive(hidden.clone(), 0);
        s.on_ack(&ack(1, hidden.id, 61, 1));
        s.on_ack(&ack(2, hidden.id, 61, 1));
        let got: Vec<_> = s.try_deliver().into_iter().map(|x| x.id).collect();
        assert_eq!(got, vec![hidden.id, m.id]);
    }

    #[test]
    fn early_ack_is_kept() {
        let mut s = State::new(NodeId(0), nodes(2));
        let m = GmdMessage {
            id: MsgId::new(NodeId(1), 1),
            ts: 5,
            payload: (),
        };
        s.on_ack(&ack(1, m.id, 6, 1));
        s.on_receive(m.clone(), 0);
        assert_eq!(s.try_deliver().len(), 1);
    }
}
