use rand::Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::{Micros, SimTime};

/// One-way delay distribution, parameters in microseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum DelayDist {
    Fixed {
        us: Micros,
    },
    Uniform {
        lo_us: Micros,
        hi_us: Micros,
    },
    /// `min_us` plus an exponential tail with the given mean.
    Exponential {
        min_us: Micros,
        mean_us: f64,
    },
    /// Log-normal with the given median and log-space standard deviation.
    LogNormal {
        median_us: f64,
        sigma: f64,
    },
}

impl DelayDist {
    /// Draws a delay; the result is always at least 1.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Micros {
        let raw = match *self {
            DelayDist::Fixed { us } => us as f64,
            DelayDist::Uniform { lo_us, hi_us } => {
                if hi_us <= lo_us {
                    lo_us as f64
                } else {
                    rng.random_range(lo_us..=hi_us) as f64
                }
            }
            DelayDist::Exponential { min_us, mean_us } => {
                let tail = if mean_us > 0.0 {
                    Exp::new(1.0 / mean_us)
                        .map(|e| e.sample(rng))
                        .unwrap_or(0.0)
                } else {
                    0.0
                };
                min_us as f64 + tail
            }
            DelayDist::LogNormal { median_us, sigma } => LogNormal::new(median_us.ln(), sigma)
                .map(|d| d.sample(rng))
                .unwrap_or(median_us),
        };
        (raw.round() as u64).max(1)
    }

    /// Analytic quantile at probability `p` in (0,1), rounded up, at least 1.
    pub fn quantile(&self, p: f64) -> Micros {
        let v = match *self {
            DelayDist::Fixed { us } => us as f64,
            DelayDist::Uniform { lo_us, hi_us } => lo_us as f64 + p * (hi_us as f64 - lo_us as f64),
            DelayDist::Exponential { min_us, mean_us } => min_us as f64 - mean_us * (1.0 - p).ln(),
            DelayDist::LogNormal { median_us, sigma } => {
                let z = Normal::new(0.0, 1.0)
                    .expect("standard normal")
                    .inverse_cdf(p);
                median_us * (sigma * z).exp()
            }
        };
        (v.ceil() as u64).max(1)
    }

    /// Returns the same family with every delay scaled by `factor`.
    pub fn scaled(&self, factor: f64) -> DelayDist {
        match *self {
            DelayDist::Fixed { us } => DelayDist::Fixed {
                us: (us as f64 * factor).round() as u64,
            },
            DelayDist::Uniform { lo_us, hi_us } => DelayDist::Uniform {
                lo_us: (lo_us as f64 * factor).round() as u64,
                hi_us: (hi_us as f64 * factor).round() as u64,
            },
            DelayDist::Exponential { min_us, mean_us } => DelayDist::Exponential {
                min_us: (min_us as f64 * factor).round() as u64,
                mean_us: mean_us * factor,
            },
            DelayDist::LogNormal { median_us, sigma } => DelayDist::LogNormal {
                median_us: median_us * factor,
                sigma,
            },
        }
    }

    pub(crate) fn validate(&self) -> Result<(), String> {
        match *self {
            DelayDist::Fixed { us: 0 } => Err("fixed delay must be positive".into()),
            DelayDist::Uniform { lo_us, hi_us } if lo_us == 0 || hi_us < lo_us => {
                Err("uniform delay needs 0 < lo_us <= hi_us".into())
            }
            DelayDist::Exponential { mean_us, .. } if mean_us.is_nan() || mean_us < 0.0 => {
                Err("exponential mean must be non-negative".into())
            }
            DelayDist::LogNormal { median_us, sigma }
                if median_us.is_nan() || median_us <= 0.0 || sigma.is_nan() || sigma < 0.0 =>
            {
                Err("log-normal needs median_us > 0 and sigma >= 0".into())
            }
            _ => Ok(()),
        }
    }
}

/// A scheduled change of the delay distribution, effective for sends at or
/// after `at_us`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DelayShift {
    pub at_us: SimTime,
    pub delay: DelayDist,
}

/// The simulated network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkModel {
    pub delay: DelayDist,
    #[serde(default)]
    pub drop_prob: f64,
    #[serde(default)]
    pub delay_shift_schedule: Vec<DelayShift>,
    /// Receive-side processing cost per message; arrivals at a busy node queue.
    #[serde(default)]
    pub processing_us: Micros,
}

impl Default for NetworkModel {
    fn default() -> Self {
        Self {
            delay: DelayDist::LogNormal {
                median_us: 500.0,
                sigma: 0.5,
            },
            drop_prob: 0.0,
            delay_shift_schedule: Vec::new(),
            processing_us: 0,
        }
    }
}

impl NetworkModel {
    pub fn fixed(us: Micros) -> Self {
        Self {
            delay: DelayDist::Fixed { us },
            ..Self::default()
        }
    }

    /// Distribution in force for a send at `t`.
    pub fn delay_at(&self, t: SimTime) -> &DelayDist {
        self.delay_shift_schedule
            .iter()
            .filter(|s| s.at_us <= t)
            .max_by_key(|s| s.at_us)
            .map(|s| &s.delay)
            .unwrap_or(&self.delay)
    }

    pub(crate) fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.drop_prob) {
            return Err(format!("drop_prob {} outside [0,1]", self.drop_prob));
        }
        self.delay.validate()?;
        for s in &self.delay_shift_schedule {
            s.delay.validate()?;
        }
        Ok(())
    }
}
