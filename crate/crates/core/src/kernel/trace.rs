//! Append-only audit trace.
//!
//! On disk a trace is CSV with the header [`TRACE_HEADER`]; `detail` is a
//! `key=value` list separated by `;` and never contains commas.

use std::fmt::Write as _;
use std::io::{self, BufRead, Write};

use thiserror::Error;

use crate::{NodeId, SimTime};

pub const TRACE_HEADER: &str = "sim_time_us,node,event_kind,msg_id,detail";

/// Well-known `event_kind` values emitted by the kernel and the harness.
pub mod kinds {
    pub const DROP: &str = "DROP";
    pub const CRASH: &str = "CRASH";
    pub const SYNC: &str = "SYNC";
    pub const SYNC_FAIL: &str = "SYNC_FAIL";
    pub const END: &str = "END";
    pub const BCAST: &str = "BCAST";
    pub const KNOW: &str = "KNOW";
    pub const DELIVER: &str = "DELIVER";
    pub const SUSPECT: &str = "SUSPECT";
    pub const UNSUSPECT: &str = "UNSUSPECT";
    pub const VIEW: &str = "VIEW";
    pub const CLIENT_REQ: &str = "CLIENT_REQ";
    pub const ORDER: &str = "ORDER";
    pub const REJECT: &str = "REJECT";
    pub const EXEC: &str = "EXEC";
    pub const TX_DONE: &str = "TX_DONE";
    pub const NO_SERVERS: &str = "NO_SERVERS";
    pub const TAKEOVER: &str = "TAKEOVER";
    pub const BACKOFF: &str = "BACKOFF";
    pub const GIVE_UP: &str = "GIVE_UP";
    pub const ANOMALY: &str = "ANOMALY";
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRecord {
    pub time: SimTime,
    pub node: NodeId,
    pub kind: String,
    pub msg_id: String,
    pub detail: String,
}

impl TraceRecord {
    /// Value of `key` in the detail field.
    pub fn field(&self, key: &str) -> Option<&str> {
        self.detail.split(';').find_map(|kv| {
            let (k, v) = kv.split_once('=')?;
            (k == key).then_some(v)
        })
    }

    pub fn field_u64(&self, key: &str) -> Option<u64> {
        self.field(key)?.parse().ok()
    }

    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.time, self.node, self.kind, self.msg_id, self.detail
        )
    }

    pub fn parse_csv_line(line: &str) -> Result<Self, TraceParseError> {
        let mut parts = line.splitn(5, ',');
        let mut next =
            |name: &'static str| parts.next().ok_or(TraceParseError::MissingColumn(name));
        let time = next("sim_time_us")?;
        let node = next("node")?;
        let kind = next("event_kind")?;
        let msg_id = next("msg_id")?;
        let detail = next("detail")?;
        Ok(TraceRecord {
            time: time
                .parse()
                .map_err(|_| TraceParseError::BadNumber(time.to_string()))?,
            node: NodeId(
                node.parse()
                    .map_err(|_| TraceParseError::BadNumber(node.to_string()))?,
            ),
            kind: kind.to_string(),
            msg_id: msg_id.to_string(),
            detail: detail.to_string(),
        })
    }
}

#[derive(Debug, Error)]
pub enum TraceParseError {
    #[error("trace is missing the header row")]
    MissingHeader,
    #[error("missing column `{0}`")]
    MissingColumn(&'static str),
    #[error("not a number: `{0}`")]
    BadNumber(String),
    #[error("line {line}: {source}")]
    Line {
        line: usize,
        #[source]
        source: Box<TraceParseError>,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Builds `key=value;key=value` detail strings.
#[derive(Default)]
pub struct Detail(String);

impl Detail {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn kv(mut self, key: &str, value: impl std::fmt::Display) -> Self {
        if !self.0.is_empty() {
            self.0.push(';');
        }
        let _ = write!(self.0, "{key}={value}");
        self
    }

    pub fn build(self) -> String {
        self.0
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Trace {
    records: Vec<TraceRecord>,
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_records(records: Vec<TraceRecord>) -> Self {
        Self { records }
    }

    pub fn push(
        &mut self,
        time: SimTime,
        node: NodeId,
        kind: &str,
        msg_id: impl Into<String>,
        detail: impl Into<String>,
    ) {
        self.records.push(TraceRecord {
            time,
            node,
            kind: kind.to_string(),
            msg_id: msg_id.into(),
            detail: detail.into(),
        });
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn of_kind<'a>(&'a self, kind: &'a str) -> impl Iterator<Item = &'a TraceRecord> + 'a {
        self.records.iter().filter(move |r| r.kind == kind)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "{TRACE_HEADER}")?;
        for r in &self.records {
            writeln!(out, "{}", r.to_csv_line())?;
        }
        out.flush()
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("trace is utf-8")
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self, TraceParseError> {
        let mut lines = input.lines();
        let header = lines.next().transpose()?;
        if header.as_deref().map(str::trim_end) != Some(TRACE_HEADER) {
            return Err(TraceParseError::MissingHeader);
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec = TraceRecord::parse_csv_line(line.trim_end()).map_err(|e| {
                TraceParseError::Line {
                    line: i + 2,
                    source: Box::new(e),
                }
            })?;
            records.push(rec);
        }
        Ok(Self { records })
    }
}
