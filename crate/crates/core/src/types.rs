use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Identifier of a simulated node.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A broadcast message identity: the sender and its per-sender sequence number.
///
/// Sequence numbers start at 1; 0 means "nothing received yet" in watermarks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MsgId {
    pub sender: NodeId,
    pub seq: u64,
}

impl MsgId {
    pub fn new(sender: NodeId, seq: u64) -> Self {
        Self { sender, seq }
    }
}

impl fmt::Display for MsgId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.sender, self.seq)
    }
}

impl FromStr for MsgId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (a, b) = s
            .split_once(':')
            .ok_or_else(|| format!("malformed msg id `{s}`"))?;
        let sender = a
            .parse()
            .map_err(|_| format!("malformed sender in msg id `{s}`"))?;
        let seq = b
            .parse()
            .map_err(|_| format!("malformed seq in msg id `{s}`"))?;
        Ok(MsgId::new(NodeId(sender), seq))
    }
}

/// Per-sender watermark of the last contiguously received sequence number.
///
/// Entries never decrease; a missing entry reads as 0.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeqVector(BTreeMap<NodeId, u64>);

impl SeqVector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, sender: NodeId) -> u64 {
        self.0.get(&sender).copied().unwrap_or(0)
    }

    /// Raises the watermark for `sender`; lower values are ignored.
    pub fn raise(&mut self, sender: NodeId, seq: u64) {
        let e = self.0.entry(sender).or_insert(0);
        if seq > *e {
            *e = seq;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, u64)> + '_ {
        self.0.iter().map(|(k, v)| (*k, *v))
    }
}
