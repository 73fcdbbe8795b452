//! Parameter sweeps: one run per (axis value, seed), executed in parallel.

use std::io;
use std::path::Path;

use rayon::prelude::*;
use serde_json::Value;
use thiserror::Error;

use super::config::{ConfigError, ScenarioConfig};
use super::metrics::RunMetrics;
use super::run::{run_scenario, RunError};
use crate::kernel::mix;

#[derive(Debug, Error)]
pub enum SweepError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("axis {axis}={value}: {source}")]
    Run {
        axis: String,
        value: f64,
        #[source]
        source: RunError,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub axis: String,
    pub value: f64,
    pub metrics: RunMetrics,
}

/// Sets `axis` to `value` on a copy of `base`. Besides the two workload
/// aliases, `axis` is a dotted path that must name an existing number.
pub fn apply_axis(
    base: &ScenarioConfig,
    axis: &str,
    value: f64,
) -> Result<ScenarioConfig, ConfigError> {
    let mut doc: Value = serde_json::from_str(&base.to_json())?;
    let number = |v: f64| -> Value {
        if v.fract() == 0.0 && v >= 0.0 {
            Value::from(v as u64)
        } else {
            Value::from(v)
        }
    };
    match axis {
        "participant_count" => {
            doc["workload"]["participant_count"] = serde_json::json!({ "fixed": value as u64 });
        }
        "arrival_rate" => doc["workload"]["arrival_rate_per_s"] = Value::from(value),
        path => {
            let mut cur = &mut doc;
            for part in path.split('.') {
                cur = cur
                    .get_mut(part)
                    .ok_or_else(|| ConfigError::invalid(axis, "no such field"))?;
            }
            if !cur.is_number() {
                return Err(ConfigError::invalid(axis, "not a numeric field"));
            }
            *cur = if cur.is_f64() {
                Value::from(value)
            } else {
                number(value)
            };
        }
    }
    let cfg = ScenarioConfig::from_json(&doc.to_string())?;
    cfg.validate()?;
    Ok(cfg)
}

/// Runs `seeds` replicas for each value. Replica `i` uses seed `mix(base.seed, i)`.
pub fn run_sweep(
    base: &ScenarioConfig,
    axis: &str,
    values: &[f64],
    seeds: u64,
) -> Result<Vec<SweepRow>, SweepError> {
    let mut jobs = Vec::new();
    for &v in values {
        let cfg = apply_axis(base, axis, v)?;
        for i in 0..seeds.max(1) {
            let mut c = cfg.clone();
            c.seed = mix(base.seed, i);
            jobs.push((v, c));
        }
    }
    jobs.into_par_iter()
        .map(|(value, cfg)| {
            run_scenario(&cfg)
                .map(|out| SweepRow {
                    axis: axis.to_string(),
                    value,
                    metrics: out.metrics,
                })
                .map_err(|source| SweepError::Run {
                    axis: axis.to_string(),
                    value,
                    source,
                })
        })
        .collect()
}

/// Renders rows as CSV with leading `axis,value` columns.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("axis,value,");
    out.push_str(&RunMetrics::csv_header().join(","));
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},", r.axis, r.value));
        out.push_str(&r.metrics.csv_row().join(","));
        out.push('\n');
    }
    out
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> io::Result<()> {
    std::fs::write(path, sweep_csv(rows))
}
