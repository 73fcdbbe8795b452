//! Deterministic discrete-event simulation of a hybrid atomic broadcast.
//!
//! The crate combines three protocol layers and a harness around them:
//!
//! - [`gmd`]: group-membership-dependent abcast that orders a message once
//!   every member has acknowledged it (and blocks when a member crashes).
//! - [`insurance`]: a synchronized-clock overlay that doubles every
//!   broadcast, detects sequence gaps from ack vectors, relays on behalf of
//!   silent senders and delivers by the deadline `ts + D + epsilon` when the
//!   all-ack rule cannot complete.
//! - [`order`]: an external ordering service that hands out global order
//!   numbers together with per-participant histories.
//!
//! [`delay`] estimates worst-case one-way delays and the bound `D`,
//! [`kernel`] is the seeded event engine every scenario runs on and
//! [`harness`] wires scenarios, trace oracles and metrics together.
//!
//! All times are integer microseconds.

pub mod delay;
pub mod gmd;
pub mod harness;
pub mod insurance;
pub mod kernel;
pub mod order;
mod types;

pub use types::{MsgId, NodeId, SeqVector};

/// Simulated real time, in microseconds since the start of a run.
pub type SimTime = u64;

/// A protocol timestamp (hybrid logical/physical clock value), microseconds.
pub type Timestamp = u64;

/// A duration in microseconds.
pub type Micros = u64;
