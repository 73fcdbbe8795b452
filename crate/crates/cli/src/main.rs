use std::path::{Path, PathBuf};
use std::process::ExitCode;

use abcast_core::delay::{compute_bound, DelayBoundConfig, DelayDistribution, DelaySample};
use abcast_core::harness::{self, sweep, ConfigError, ScenarioConfig};
use abcast_core::kernel::Trace;
use abcast_core::NodeId;
use anyhow::Context;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "abcast",
    version,
    about = "Deterministic atomic-broadcast simulator"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one scenario and write metrics.json, trace.csv and config.json.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a scenario once per axis value and write sweep.csv.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Dotted config path, or `participant_count` / `arrival_rate`.
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        /// Replicas per value, seeded from the config seed.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a trace for total-order violations; exits 1 if any are found.
    CheckTrace { trace: PathBuf },
    /// Estimate d_i and D from a `from,to,delay_us` sample file.
    EstimateD {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        eta: u64,
        #[arg(long)]
        theta: u64,
        #[arg(long)]
        epsilon: u64,
        #[arg(long, default_value_t = 0.9999)]
        percentile: f64,
        #[arg(long, default_value_t = 0)]
        margin: u64,
    },
}

/// Input problems map to exit code 2, everything else to 1.
enum Failure {
    Input(anyhow::Error),
    Other(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

fn input<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Input(e.into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(code) => code,
        Err(Failure::Input(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn load(path: &Path) -> Result<ScenarioConfig, Failure> {
    harness::load_config(path)
        .with_context(|| format!("loading {}", path.display()))
        .map_err(Failure::Input)
}

fn dispatch(cmd: Cmd) -> Result<ExitCode, Failure> {
    match cmd {
        Cmd::Simulate { config, out } => {
            let cfg = load(&config)?;
            let run = harness::run_scenario(&cfg).map_err(|e| match e {
                harness::RunError::Config(c) => input(c),
                other => Failure::Other(other.into()),
            })?;
            run.write_to(&out).context("writing outputs")?;
            let m = &run.metrics;
            println!(
                "delivered={} order_violations={} case2={} p50={}us blocked={}us",
                m.delivered_total,
                m.order_violations,
                m.case2_count,
                m.latency_percentiles.p50_us,
                m.blocked_interval_us
            );
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Sweep {
            config,
            axis,
            values,
            seeds,
            out,
        } => {
            let cfg = load(&config)?;
            let rows = sweep::run_sweep(&cfg, &axis, &values, seeds).map_err(|e| match e {
                sweep::SweepError::Config(c) => input(c),
                other => Failure::Other(other.into()),
            })?;
            std::fs::create_dir_all(&out).context("creating output directory")?;
            let path = out.join("sweep.csv");
            sweep::write_sweep_csv(&rows, &path).context("writing sweep.csv")?;
            println!("{} runs written to {}", rows.len(), path.display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::CheckTrace { trace } => {
            let file = std::fs::File::open(&trace)
                .with_context(|| format!("opening {}", trace.display()))
                .map_err(Failure::Input)?;
            let t = Trace::read_csv(std::io::BufReader::new(file)).map_err(input)?;
            let violations = harness::check_total_order(&t).map_err(input)?;
            if violations.is_empty() {
                println!("ok: no total-order violations");
                return Ok(ExitCode::SUCCESS);
            }
            for v in &violations {
                println!("{v}");
            }
            println!("{} violation(s)", violations.len());
            Ok(ExitCode::from(1))
        }
        Cmd::EstimateD {
            samples,
            eta,
            theta,
            epsilon,
            percentile,
            margin,
        } => {
            let cfg = DelayBoundConfig {
                percentile,
                eta_us: eta,
                theta_us: theta,
                epsilon_us: epsilon,
                safety_margin_us: margin,
            };
            if !(percentile > 0.0 && percentile < 1.0) {
                return Err(input(ConfigError::invalid(
                    "percentile",
                    "must lie in (0,1)",
                )));
            }
            let rows = read_samples(&samples).map_err(Failure::Input)?;
            let mut dist = DelayDistribution::new(rows.len().max(1));
            let mut skipped = 0u64;
            for s in rows {
                if dist.observe(s).is_err() {
                    skipped += 1;
                }
            }
            let d = dist.estimate_worst_case(&cfg).map_err(input)?;
            let bound = compute_bound(d, &cfg).map_err(input)?;
            println!("samples={} skipped={skipped}", dist.len());
            println!("d_i={d}");
            println!("D={bound}");
            Ok(ExitCode::SUCCESS)
        }
    }
}

#[derive(serde::Deserialize)]
struct Row {
    from: u32,
    to: u32,
    delay_us: i64,
}

fn read_samples(path: &Path) -> anyhow::Result<Vec<DelaySample>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, rec) in rdr.deserialize::<Row>().enumerate() {
        let r = rec.with_context(|| format!("sample row {}", i + 2))?;
        out.push(DelaySample {
            from: NodeId(r.from),
            to: NodeId(r.to),
            observed_delay_us: r.delay_us,
        });
    }
    Ok(out)
}
