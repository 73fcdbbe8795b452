//! One-way delay estimation and the insurance bound `D`.
//!
//! A node records `receiver clock - sender timestamp` for traffic it
//! receives, keeps the most recent `window_size` samples, and derives its
//! worst-case one-way delay `d` as a high nearest-rank quantile plus the
//! clock accuracy. [`compute_bound`] turns `d` into the bound used for the
//! deadline `ts + D + epsilon`.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::{Micros, NodeId};

pub const DEFAULT_WINDOW: usize = 10_000;
pub const DEFAULT_PERCENTILE: f64 = 0.9999;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EstimateError {
    #[error("non-positive delay {0}us (clock anomaly)")]
    NonPositive(i64),
    #[error("no delay samples")]
    Empty,
}

/// One observation: receiver clock minus sender timestamp.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DelaySample {
    pub from: NodeId,
    pub to: NodeId,
    pub observed_delay_us: i64,
}

impl DelaySample {
    pub fn from_timestamps(from: NodeId, to: NodeId, sender_ts: u64, receiver_clock: u64) -> Self {
        Self {
            from,
            to,
            observed_delay_us: receiver_clock as i64 - sender_ts as i64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelayBoundConfig {
    /// Quantile used for the worst case, in (0,1).
    pub percentile: f64,
    pub eta_us: Micros,
    pub theta_us: Micros,
    pub epsilon_us: Micros,
    pub safety_margin_us: Micros,
}

impl Default for DelayBoundConfig {
    fn default() -> Self {
        Self {
            percentile: DEFAULT_PERCENTILE,
            eta_us: 2_000,
            theta_us: 1_000,
            epsilon_us: 1_000,
            safety_margin_us: 0,
        }
    }
}

/// Sliding window of delay samples with order statistics.
#[derive(Debug, Clone)]
pub struct DelayDistribution {
    window_size: usize,
    samples: VecDeque<u64>,
    counts: BTreeMap<u64, usize>,
    discarded: u64,
}

impl Default for DelayDistribution {
    fn default() -> Self {
        Self::new(DEFAULT_WINDOW)
    }
}

impl DelayDistribution {
    pub fn new(window_size: usize) -> Self {
        assert!(window_size > 0, "window_size must be positive");
        Self {
            window_size,
            samples: VecDeque::with_capacity(window_size.min(4096)),
            counts: BTreeMap::new(),
            discarded: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Samples rejected as non-positive so far.
    pub fn discarded(&self) -> u64 {
        self.discarded
    }

    /// Window contents, oldest first.
    pub fn samples(&self) -> impl Iterator<Item = u64> + '_ {
        self.samples.iter().copied()
    }

    /// Appends a sample, evicting the oldest when the window is full.
    pub fn observe(&mut self, sample: DelaySample) -> Result<(), EstimateError> {
        if sample.observed_delay_us <= 0 {
            self.discarded += 1;
            return Err(EstimateError::NonPositive(sample.observed_delay_us));
        }
        self.push(sample.observed_delay_us as u64);
        Ok(())
    }

    fn push(&mut self, v: u64) {
        if self.samples.len() == self.window_size {
            if let Some(old) = self.samples.pop_front() {
                if let Some(c) = self.counts.get_mut(&old) {
                    *c -= 1;
                    if *c == 0 {
                        self.counts.remove(&old);
                    }
                }
            }
        }
        self.samples.push_back(v);
        *self.counts.entry(v).or_insert(0) += 1;
    }

    /// Nearest-rank quantile: the `ceil(q * n)`-th smallest sample (1-based,
    /// clamped to `[1, n]`). `q` is resolved to 1e-9.
    pub fn quantile(&self, q: f64) -> Result<u64, EstimateError> {
        let n = self.samples.len();
        if n == 0 {
            return Err(EstimateError::Empty);
        }
        let rank = nearest_rank(q, n);
        if rank * 2 <= n {
            let mut seen = 0;
            for (&v, &c) in &self.counts {
                seen += c;
                if seen >= rank {
                    return Ok(v);
                }
            }
        } else {
            let from_top = n - rank + 1;
            let mut seen = 0;
            for (&v, &c) in self.counts.iter().rev() {
                seen += c;
                if seen >= from_top {
                    return Ok(v);
                }
            }
        }
        unreachable!("rank {rank} within window of {n}")
    }

    /// `d = quantile(percentile) + epsilon`.
    pub fn estimate_worst_case(&self, cfg: &DelayBoundConfig) -> Result<Micros, EstimateError> {
        Ok(self.quantile(cfg.percentile)? + cfg.epsilon_us)
    }
}

fn nearest_rank(q: f64, n: usize) -> usize {
    const SCALE: u128 = 1_000_000_000;
    let q_scaled = (q.clamp(0.0, 1.0) * SCALE as f64).round() as u128;
    let rank = (q_scaled * n as u128).div_ceil(SCALE) as usize;
    rank.clamp(1, n)
}

/// Insurance bound for worst-case one-way delay `d`:
/// `D = 2d + 2 eta + theta + margin`.
///
/// The timeline assumes the sender crashes during its first copy: the copy
/// reaches a relayer (`d`), which waits out the second-copy timeout
/// (`eta + theta`), re-broadcasts both copies `eta` apart, and the second
/// relayed copy reaches the last recipient (`d`).
pub fn compute_bound(d: Micros, cfg: &DelayBoundConfig) -> Result<Micros, EstimateError> {
    if d == 0 {
        return Err(EstimateError::NonPositive(0));
    }
    Ok(2 * d + 2 * cfg.eta_us + cfg.theta_us + cfg.safety_margin_us)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(v: i64) -> DelaySample {
        DelaySample {
            from: NodeId(1),
            to: NodeId(0),
            observed_delay_us: v,
        }
    }

    fn window(values: &[i64], size: usize) -> DelayDistribution {
        let mut d = DelayDistribution::new(size);
        for &v in values {
            d.observe(sample(v)).unwrap();
        }
        d
    }

    #[test]
    fn observe_appends() {
        let d = window(&[500], 10);
        assert_eq!(d.samples().collect::<Vec<_>>(), vec![500]);
    }

    #[test]
    fn observe_evicts_fifo() {
        let mut d = window(&[1, 2, 3], 3);
        d.observe(sample(4)).unwrap();
        assert_eq!(d.samples().collect::<Vec<_>>(), vec![2, 3, 4]);
        assert_eq!(d.quantile(0.01).unwrap(), 2);
    }

    #[test]
    fn receiver_behind_sender_is_rejected_and_counted() {
        let mut d = DelayDistribution::new(4);
        let s = DelaySample::from_timestamps(NodeId(1), NodeId(0), 10_000, 9_700);
        assert_eq!(d.observe(s), Err(EstimateError::NonPositive(-300)));
        assert_eq!(d.discarded(), 1);
        assert!(d.is_empty());
    }

    #[test]
    fn constant_distribution_quantiles() {
        let d = window(&[5000; 20], 100);
        for q in [0.001, 0.5, 0.9999] {
            assert_eq!(d.quantile(q).unwrap(), 5000);
        }
    }

    #[test]
    fn nearest_rank_examples() {
        let d = window(&[700, 100, 1000, 300, 900, 200, 500, 400, 600, 800], 100);
        // ceil(0.5 * 10) = 5th smallest
        assert_eq!(d.quantile(0.5).unwrap(), 500);
        // ceil(9.999) = 10th smallest
        assert_eq!(d.quantile(0.9999).unwrap(), 1000);
    }

    #[test]
    fn empty_window_errors() {
        let d = DelayDistribution::new(3);
        assert_eq!(d.quantile(0.5), Err(EstimateError::Empty));
        assert_eq!(
            d.estimate_worst_case(&DelayBoundConfig::default()),
            Err(EstimateError::Empty)
        );
    }

    #[test]
    fn worst_case_adds_epsilon() {
        let cfg = DelayBoundConfig {
            epsilon_us: 100,
            ..DelayBoundConfig::default()
        };
        assert_eq!(
            window(&[5000; 50], 100).estimate_worst_case(&cfg).unwrap(),
            5100
        );
        let cfg0 = DelayBoundConfig {
            epsilon_us: 0,
            ..cfg
        };
        assert_eq!(
            window(&[10, 1000, 40], 100)
                .estimate_worst_case(&cfg0)
                .unwrap(),
            1000
        );
    }

    #[test]
    fn bound_examples() {
        let cfg = DelayBoundConfig {
            eta_us: 2000,
            theta_us: 1000,
            safety_margin_us: 0,
            ..DelayBoundConfig::default()
        };
        assert_eq!(compute_bound(5000, &cfg).unwrap(), 15_000);
        assert_eq!(
            compute_bound(
                5000,
                &DelayBoundConfig {
                    safety_margin_us: 500,
                    ..cfg
                }
            )
            .unwrap(),
            15_500
        );
        let zero = DelayBoundConfig {
            eta_us: 0,
            theta_us: 0,
            safety_margin_us: 0,
            ..cfg
        };
        assert_eq!(compute_bound(1, &zero).unwrap(), 2);
        assert_eq!(compute_bound(0, &zero), Err(EstimateError::NonPositive(0)));
    }
}
