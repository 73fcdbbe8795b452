use crate::{Micros, NodeId, SimTime};

/// A node's drifting physical clock.
///
/// The reading at simulated time `t` is
/// `t + offset_us + drift_ppm * (t - synced_at) / 10^6`, floored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeClock {
    pub node_id: NodeId,
    /// Offset from simulated time at the last (re)synchronization.
    pub offset_us: i64,
    /// Rate error in parts per million.
    pub drift_ppm: i64,
    /// Accuracy achieved by the last successful sync.
    pub epsilon_us: Micros,
    pub synced_at: SimTime,
    pub synchronized: bool,
}

impl NodeClock {
    pub fn new(node_id: NodeId, offset_us: i64, drift_ppm: i64) -> Self {
        Self {
            node_id,
            offset_us,
            drift_ppm,
            epsilon_us: 0,
            synced_at: 0,
            synchronized: false,
        }
    }

    /// An ideal clock that always reads simulated time.
    pub fn perfect(node_id: NodeId) -> Self {
        Self::new(node_id, 0, 0)
    }

    fn drift_accrued(&self, now: SimTime) -> i64 {
        let elapsed = now.saturating_sub(self.synced_at) as i128;
        (elapsed * self.drift_ppm as i128).div_euclid(1_000_000) as i64
    }

    /// Signed reading; may be negative early in a run with a negative offset.
    pub fn reading_signed(&self, now: SimTime) -> i64 {
        now as i64 + self.offset_us + self.drift_accrued(now)
    }

    /// Local clock reading, saturated at zero.
    pub fn reading(&self, now: SimTime) -> u64 {
        self.reading_signed(now).max(0) as u64
    }

    /// Signed error of the reading against simulated time.
    pub fn error(&self, now: SimTime) -> i64 {
        self.reading_signed(now) - now as i64
    }

    /// Steps the clock so that it reads `target` at `now`.
    pub fn set_reading(&mut self, now: SimTime, target: i64, accuracy: Micros) {
        self.offset_us = target - now as i64;
        self.synced_at = now;
        self.epsilon_us = accuracy;
        self.synchronized = true;
    }

    /// Earliest simulated time `t >= from` at which the clock reads at least
    /// `local`, assuming no resync in between.
    pub fn sim_time_at(&self, from: SimTime, local: u64) -> SimTime {
        if self.reading_signed(from) >= local as i64 {
            return from;
        }
        let rate = 1.0 + self.drift_ppm as f64 * 1e-6;
        let need = (local as i64 - self.reading_signed(from)) as f64;
        let mut t = from + (need / rate).floor().max(0.0) as u64;
        while self.reading_signed(t) < local as i64 {
            t += 1;
        }
        while t > from && self.reading_signed(t - 1) >= local as i64 {
            t -= 1;
        }
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_clock_reads_sim_time() {
        assert_eq!(NodeClock::perfect(NodeId(0)).reading(1000), 1000);
    }

    #[test]
    fn pure_offset() {
        assert_eq!(NodeClock::new(NodeId(0), 50, 0).reading(1000), 1050);
    }

    #[test]
    fn drift_accrual_matches_elapsed_times_ppm() {
        // oracle: elapsed * ppm * 1e-6 = 1e6 * 100 * 1e-6 = 100
        let c = NodeClock::new(NodeId(0), 0, 100);
        assert_eq!(c.reading(1_000_000), 1_000_100);
        let slow = NodeClock::new(NodeId(0), 0, -100);
        assert_eq!(slow.reading(1_000_000), 999_900);
    }

    #[test]
    fn sim_time_at_inverts_reading() {
        for drift in [-250, -1, 0, 7, 300] {
            let c = NodeClock::new(NodeId(1), -400, drift);
            for local in [0u64, 1, 999, 123_456, 9_999_999] {
                let t = c.sim_time_at(0, local);
                assert!(c.reading_signed(t) >= local as i64);
                if t > 0 {
                    assert!(c.reading_signed(t - 1) < local as i64);
                }
            }
        }
    }
}
