//! Durable decision log: one JSON document per line, one line per channel
//! cycle. Field order is fixed by the struct definitions, so two runs with
//! the same inputs produce byte-identical files.

use std::collections::{BTreeMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{ChannelState, CycleReport, PublishStatus};
use crate::datablock::{DataBlock, Payload, ProductHeader, SimTime};
use crate::logic::FactValue;
use crate::money::Money;

/// A resource request as delivered to the provisioner and recorded in the log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub cycle_id: u64,
    pub entry_id: String,
    pub slots: u64,
    pub projected_cost: Money,
    pub fom_value: f64,
    pub fired_rules: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsumedEntry {
    pub product: String,
    pub generation: u64,
    pub digest: String,
    /// Header and payload are present the first time a generation appears
    /// in the log.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub header: Option<ProductHeader>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<Payload>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub cycle_id: u64,
    pub channel_id: String,
    pub sim_time_s: SimTime,
    pub consumed: Vec<ConsumedEntry>,
    pub fact_values: BTreeMap<String, FactValue>,
    pub fired_rules: Vec<String>,
    pub requests: Vec<RequestRecord>,
    pub publish_status: PublishStatus,
    pub cumulative_spend: Money,
    pub channel_state: ChannelState,
    pub incidents: Vec<String>,
}

impl DecisionRecord {
    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("decision record serializes");
        s.push('\n');
        s
    }

    /// Spend acknowledged in this record. Only acknowledged requests are
    /// recorded; a failed publisher contributes none.
    pub fn acknowledged_spend(&self) -> Money {
        self.requests.iter().map(|r| r.projected_cost).sum()
    }
}

/// Turns cycle reports into decision records, tracking per-channel spend and
/// which product generations already had their payload written.
#[derive(Debug, Default)]
pub struct RecordBuilder {
    spend: BTreeMap<String, Money>,
    payload_logged: HashSet<(String, String, u64)>,
}

impl RecordBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn cumulative_spend(&self, channel_id: &str) -> Money {
        self.spend.get(channel_id).copied().unwrap_or_default()
    }

    pub fn build(&mut self, report: &CycleReport, datablock: &DataBlock) -> DecisionRecord {
        let consumed = report
            .consumed
            .iter()
            .map(|c| {
                let key = (report.channel_id.clone(), c.product.clone(), c.generation);
                let stored = if self.payload_logged.insert(key) {
                    datablock.generation(&report.channel_id, &c.product, c.generation)
                } else {
                    None
                };
                ConsumedEntry {
                    product: c.product.clone(),
                    generation: c.generation,
                    digest: c.digest.clone(),
                    header: stored.as_ref().map(|p| p.header.clone()),
                    payload: stored.map(|p| p.payload().clone()),
                }
            })
            .collect();
        let mut record = DecisionRecord {
            cycle_id: report.cycle_id,
            channel_id: report.channel_id.clone(),
            sim_time_s: report.sim_time_s,
            consumed,
            fact_values: if report.outcome.is_completed() {
                report.all_fact_values()
            } else {
                BTreeMap::new()
            },
            fired_rules: report.evaluation.fired_rules.clone(),
            requests: report.requests().cloned().collect(),
            publish_status: report.publish_status(),
            cumulative_spend: Money::ZERO,
            channel_state: report.state_after,
            incidents: report.incidents.clone(),
        };
        if !report.outcome.is_completed() {
            record
                .incidents
                .push(format!("cycle aborted: {}", report.outcome));
        }
        let spend = self.spend.entry(report.channel_id.clone()).or_default();
        *spend += record.acknowledged_spend();
        record.cumulative_spend = *spend;
        record
    }
}

/// Append-only writer. Each record goes out in a single write.
pub struct DecisionLogWriter {
    file: File,
}

impl DecisionLogWriter {
    /// Creates a new log; fails if `path` exists and is non-empty.
    pub fn create(path: &Path) -> io::Result<Self> {
        if path.metadata().map(|m| m.len() > 0).unwrap_or(false) {
            return Err(io::Error::new(
                io::ErrorKind::AlreadyExists,
                format!("decision log {} already has records", path.display()),
            ));
        }
        Self::open_append(path)
    }

    pub fn open_append(path: &Path) -> io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { file })
    }

    pub fn append(&mut self, record: &DecisionRecord) -> io::Result<()> {
        self.file.write_all(record.to_line().as_bytes())?;
        self.file.flush()
    }
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("cannot read decision log: {0}")]
    Io(#[from] io::Error),
    #[error("corrupt record at line {line}: {message}")]
    CorruptRecord { line: usize, message: String },
}

/// Result of reading a log: every good record up to the first bad line.
#[derive(Debug, Default)]
pub struct LogContents {
    pub records: Vec<DecisionRecord>,
    pub corrupt: Option<(usize, String)>,
}

impl LogContents {
    pub fn into_result(self) -> Result<Vec<DecisionRecord>, LogError> {
        match self.corrupt {
            Some((line, message)) => Err(LogError::CorruptRecord { line, message }),
            None => Ok(self.records),
        }
    }
}

pub fn read_log(path: &Path) -> Result<LogContents, LogError> {
    let mut out = LogContents::default();
    // keep the terminator so a truncated final line is detectable
    let mut reader = BufReader::new(File::open(path)?);
    let mut buf = Vec::new();
    let mut line_no = 0;
    loop {
        buf.clear();
        let n = reader.read_until(b'\n', &mut buf)?;
        if n == 0 {
            break;
        }
        line_no += 1;
        if buf.last() != Some(&b'\n') {
            out.corrupt = Some((line_no, "truncated record (no line terminator)".into()));
            break;
        }
        match serde_json::from_slice::<DecisionRecord>(&buf[..buf.len() - 1]) {
            Ok(r) => out.records.push(r),
            Err(e) => {
                out.corrupt = Some((line_no, e.to_string()));
                break;
            }
        }
    }
    Ok(out)
}
