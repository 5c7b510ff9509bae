//! Reference provisioning channel: match idle jobs to resource entries, rank
//! the eligible entries by figure of merit, then fill demand greedily under
//! budget, per-entry and allocation limits.

mod modules;

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datablock::{Payload, Record, Value};
use crate::decision_log::RequestRecord;
use crate::money::Money;

pub use modules::{
    EligibilityTransform, FomRankingTransform, ProvisionerPublisher, RequestGenerationTransform,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Idle,
    Running,
    Done,
}

impl JobState {
    pub fn as_str(self) -> &'static str {
        match self {
            JobState::Idle => "idle",
            JobState::Running => "running",
            JobState::Done => "done",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "idle" => JobState::Idle,
            "running" => JobState::Running,
            "done" => JobState::Done,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Grid,
    Cloud,
    Hpc,
}

impl ProviderKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ProviderKind::Grid => "grid",
            ProviderKind::Cloud => "cloud",
            ProviderKind::Hpc => "hpc",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "grid" => ProviderKind::Grid,
            "cloud" => ProviderKind::Cloud,
            "hpc" => ProviderKind::Hpc,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryState {
    Up,
    Down,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("bad {what} record: {message}")]
pub struct RecordError {
    pub what: &'static str,
    pub message: String,
}

fn field<'a>(rec: &'a Record, what: &'static str, name: &str) -> Result<&'a Value, RecordError> {
    rec.get(name).ok_or_else(|| RecordError {
        what,
        message: format!("missing field `{name}`"),
    })
}

fn text(rec: &Record, what: &'static str, name: &str) -> Result<String, RecordError> {
    field(rec, what, name)?
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| RecordError {
            what,
            message: format!("field `{name}` must be a string"),
        })
}

fn real(rec: &Record, what: &'static str, name: &str) -> Result<f64, RecordError> {
    field(rec, what, name)?.as_f64().ok_or_else(|| RecordError {
        what,
        message: format!("field `{name}` must be a number"),
    })
}

fn count(rec: &Record, what: &'static str, name: &str) -> Result<u64, RecordError> {
    let v = real(rec, what, name)?;
    if v < 0.0 || v.fract() != 0.0 || v > u64::MAX as f64 {
        return Err(RecordError {
            what,
            message: format!("field `{name}` must be a non-negative integer, got {v}"),
        });
    }
    Ok(v as u64)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Job {
    pub job_id: String,
    pub cores: u64,
    pub memory_mb: u64,
    pub max_walltime_s: u64,
    pub site_whitelist: Option<Vec<String>>,
    pub state: JobState,
}

impl Job {
    /// Table row form. The whitelist is a comma-separated string, empty when absent.
    pub fn to_record(&self) -> Record {
        Record::from([
            ("job_id".to_string(), Value::from(self.job_id.as_str())),
            ("cores".to_string(), Value::from(self.cores)),
            ("memory_mb".to_string(), Value::from(self.memory_mb)),
            (
                "max_walltime_s".to_string(),
                Value::from(self.max_walltime_s),
            ),
            (
                "site_whitelist".to_string(),
                Value::from(
                    self.site_whitelist
                        .as_ref()
                        .map(|w| w.join(","))
                        .unwrap_or_default(),
                ),
            ),
            ("state".to_string(), Value::from(self.state.as_str())),
        ])
    }

    pub fn from_record(rec: &Record) -> Result<Self, RecordError> {
        const W: &str = "job";
        let whitelist = text(rec, W, "site_whitelist")?;
        let state = text(rec, W, "state")?;
        let job = Job {
            job_id: text(rec, W, "job_id")?,
            cores: count(rec, W, "cores")?,
            memory_mb: count(rec, W, "memory_mb")?,
            max_walltime_s: count(rec, W, "max_walltime_s")?,
            site_whitelist: if whitelist.is_empty() {
                None
            } else {
                Some(whitelist.split(',').map(|s| s.trim().to_string()).collect())
            },
            state: JobState::parse(&state).ok_or_else(|| RecordError {
                what: W,
                message: format!("unknown job state `{state}`"),
            })?,
        };
        if job.cores == 0 || job.memory_mb == 0 {
            return Err(RecordError {
                what: W,
                message: format!(
                    "job `{}` must request at least one core and one MB",
                    job.job_id
                ),
            });
        }
        Ok(job)
    }

    pub fn fits(&self, entry: &ResourceEntry) -> bool {
        entry.state == EntryState::Up
            && self.cores <= entry.slot_cores
            && self.memory_mb <= entry.slot_memory_mb
            && self
                .site_whitelist
                .as_ref()
                .is_none_or(|w| w.iter().any(|p| p == &entry.provider))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResourceEntry {
    pub entry_id: String,
    pub provider: String,
    pub provider_kind: ProviderKind,
    pub slot_cores: u64,
    pub slot_memory_mb: u64,
    pub price_per_core_hour: f64,
    pub performance_score: f64,
    pub occupancy: f64,
    pub state: EntryState,
    pub max_slots: u64,
    /// Hpc entries only; `None` means unbounded.
    pub allocation_core_hours_remaining: Option<f64>,
}

impl ResourceEntry {
    pub fn to_record(&self) -> Record {
        let mut rec = Record::from([
            ("entry_id".to_string(), Value::from(self.entry_id.as_str())),
            ("provider".to_string(), Value::from(self.provider.as_str())),
            (
                "provider_kind".to_string(),
                Value::from(self.provider_kind.as_str()),
            ),
            ("slot_cores".to_string(), Value::from(self.slot_cores)),
            (
                "slot_memory_mb".to_string(),
                Value::from(self.slot_memory_mb),
            ),
            (
                "price_per_core_hour".to_string(),
                Value::from(self.price_per_core_hour),
            ),
            (
                "performance_score".to_string(),
                Value::from(self.performance_score),
            ),
            ("occupancy".to_string(), Value::from(self.occupancy)),
            (
                "state".to_string(),
                Value::from(match self.state {
                    EntryState::Up => "up",
                    EntryState::Down => "down",
                }),
            ),
            ("max_slots".to_string(), Value::from(self.max_slots)),
        ]);
        if let Some(a) = self.allocation_core_hours_remaining {
            rec.insert("allocation_core_hours_remaining".into(), Value::from(a));
        }
        rec
    }

    pub fn from_record(rec: &Record) -> Result<Self, RecordError> {
        const W: &str = "resource entry";
        let bad = |message: String| RecordError { what: W, message };
        let kind = text(rec, W, "provider_kind")?;
        let state = text(rec, W, "state")?;
        let entry = ResourceEntry {
            entry_id: text(rec, W, "entry_id")?,
            provider: text(rec, W, "provider")?,
            provider_kind: ProviderKind::parse(&kind)
                .ok_or_else(|| bad(format!("unknown provider kind `{kind}`")))?,
            slot_cores: count(rec, W, "slot_cores")?,
            slot_memory_mb: count(rec, W, "slot_memory_mb")?,
            price_per_core_hour: real(rec, W, "price_per_core_hour")?,
            performance_score: real(rec, W, "performance_score")?,
            occupancy: real(rec, W, "occupancy")?,
            state: match state.as_str() {
                "up" => EntryState::Up,
                "down" => EntryState::Down,
                _ => return Err(bad(format!("unknown entry state `{state}`"))),
            },
            max_slots: count(rec, W, "max_slots")?,
            allocation_core_hours_remaining: match rec.get("allocation_core_hours_remaining") {
                None => None,
                Some(v) => Some(
                    v.as_f64()
                        .ok_or_else(|| bad("allocation must be a number".into()))?,
                ),
            },
        };
        if !(0.0..=1.0).contains(&entry.occupancy) {
            return Err(bad(format!("occupancy {} outside [0,1]", entry.occupancy)));
        }
        let price_ok = entry.price_per_core_hour >= 0.0;
        let perf_ok = entry.performance_score > 0.0;
        if !price_ok || !perf_ok {
            return Err(bad("price must be >= 0 and performance > 0".into()));
        }
        if entry.provider_kind == ProviderKind::Hpc
            && entry.allocation_core_hours_remaining.is_none()
        {
            return Err(bad(format!(
                "hpc entry `{}` has no allocation",
                entry.entry_id
            )));
        }
        Ok(entry)
    }

    /// Slots not currently in use, derived from occupancy.
    pub fn free_slots(&self) -> u64 {
        let used = (self.occupancy * self.max_slots as f64).round() as u64;
        self.max_slots.saturating_sub(used)
    }

    pub fn figure_of_merit(&self) -> f64 {
        (self.price_per_core_hour / self.performance_score) * (1.0 + self.occupancy)
    }

    /// Projected cost of `slots` slots for `walltime_s`, rounded once to the
    /// nearest micro-unit.
    pub fn request_cost(&self, slots: u64, walltime_s: u64) -> Money {
        Money::from_f64(
            slots as f64 * self.slot_cores as f64 * self.price_per_core_hour * walltime_s as f64
                / 3600.0,
        )
    }

    /// Largest `n <= cap` whose request cost fits in `budget`.
    pub fn affordable_slots(&self, budget: Money, walltime_s: u64, cap: u64) -> u64 {
        // cost is non-decreasing in n, so bisect
        let (mut lo, mut hi) = (0u64, cap);
        while lo < hi {
            let mid = lo + (hi - lo).div_ceil(2);
            if self.request_cost(mid, walltime_s) <= budget {
                lo = mid;
            } else {
                hi = mid - 1;
            }
        }
        lo
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FigureOfMerit {
    pub entry_id: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub budget_remaining: Money,
    pub per_entry_max_request: u64,
    pub expected_job_walltime_s: u64,
}

impl PolicyParams {
    pub fn to_record(&self) -> Record {
        Record::from([
            (
                "budget_remaining".to_string(),
                Value::from(self.budget_remaining.as_f64()),
            ),
            (
                "per_entry_max_request".to_string(),
                Value::from(self.per_entry_max_request),
            ),
            (
                "expected_job_walltime_s".to_string(),
                Value::from(self.expected_job_walltime_s),
            ),
        ])
    }

    pub fn from_record(rec: &Record) -> Result<Self, RecordError> {
        const W: &str = "policy";
        let budget = real(rec, W, "budget_remaining")?;
        let p = PolicyParams {
            budget_remaining: Money::from_f64(budget),
            per_entry_max_request: count(rec, W, "per_entry_max_request")?,
            expected_job_walltime_s: count(rec, W, "expected_job_walltime_s")?,
        };
        if budget < 0.0 || p.per_entry_max_request == 0 || p.expected_job_walltime_s == 0 {
            return Err(RecordError {
                what: W,
                message: "budget must be >= 0, per-entry max and walltime positive".into(),
            });
        }
        Ok(p)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResourceRequest {
    pub entry_id: String,
    pub slots: u64,
    pub projected_cost: Money,
    pub fom_value: f64,
}

impl ResourceRequest {
    pub fn to_record(&self) -> Record {
        Record::from([
            ("entry_id".to_string(), Value::from(self.entry_id.as_str())),
            ("slots".to_string(), Value::from(self.slots)),
            (
                "projected_cost".to_string(),
                Value::from(self.projected_cost.as_f64()),
            ),
            ("fom_value".to_string(), Value::from(self.fom_value)),
        ])
    }

    pub fn from_record(rec: &Record) -> Result<Self, RecordError> {
        const W: &str = "resource request";
        Ok(ResourceRequest {
            entry_id: text(rec, W, "entry_id")?,
            slots: count(rec, W, "slots")?,
            projected_cost: Money::from_f64(real(rec, W, "projected_cost")?),
            fom_value: real(rec, W, "fom_value")?,
        })
    }
}

/// Entry id to eligible idle job ids (queue order). Entries with no
/// eligible job are absent.
pub type Eligibility = BTreeMap<String, Vec<String>>;

/// Eligibility as a table of `(entry_id, job_id)` rows.
pub fn eligibility_to_payload(elig: &Eligibility) -> Payload {
    Payload::Table(
        elig.iter()
            .flat_map(|(e, jobs)| {
                jobs.iter().map(move |j| {
                    Record::from([
                        ("entry_id".to_string(), Value::from(e.as_str())),
                        ("job_id".to_string(), Value::from(j.as_str())),
                    ])
                })
            })
            .collect(),
    )
}

pub fn eligibility_from_payload(payload: &Payload) -> Result<Eligibility, RecordError> {
    const W: &str = "eligibility";
    let rows = payload.as_table().ok_or(RecordError {
        what: W,
        message: "expected a table".into(),
    })?;
    let mut out = Eligibility::new();
    for row in rows {
        out.entry(text(row, W, "entry_id")?)
            .or_default()
            .push(text(row, W, "job_id")?);
    }
    Ok(out)
}

/// Pairs each up entry with the idle jobs it can run.
pub fn match_eligibility(jobs: &[Job], entries: &[ResourceEntry]) -> Eligibility {
    let mut out = Eligibility::new();
    for entry in entries {
        let matched: Vec<String> = jobs
            .iter()
            .filter(|j| j.state == JobState::Idle && j.fits(entry))
            .map(|j| j.job_id.clone())
            .collect();
        if !matched.is_empty() {
            out.insert(entry.entry_id.clone(), matched);
        }
    }
    out
}

/// Ascending figure of merit, ties by entry id.
pub fn rank_by_fom(entries: &[ResourceEntry]) -> Vec<FigureOfMerit> {
    let mut ranked: Vec<FigureOfMerit> = entries
        .iter()
        .map(|e| FigureOfMerit {
            entry_id: e.entry_id.clone(),
            value: e.figure_of_merit(),
        })
        .collect();
    ranked.sort_by(|a, b| {
        a.value
            .total_cmp(&b.value)
            .then_with(|| a.entry_id.cmp(&b.entry_id))
    });
    ranked
}

/// Greedy fill in figure-of-merit order.
///
/// Each entry gets the smallest of: its eligible idle jobs not yet served by
/// an earlier entry, the per-entry cap, its free slots, the whole slots the
/// remaining budget buys, and (hpc) the whole slots the remaining allocation
/// covers. Served jobs are taken in queue order. Filling stops once demand
/// or budget reaches zero.
pub fn generate_requests(
    ranked: &[FigureOfMerit],
    eligibility: &Eligibility,
    jobs: &[Job],
    entries: &[ResourceEntry],
    policy: &PolicyParams,
) -> Vec<ResourceRequest> {
    let queue_pos: BTreeMap<&str, usize> = jobs
        .iter()
        .enumerate()
        .filter(|(_, j)| j.state == JobState::Idle)
        .map(|(i, j)| (j.job_id.as_str(), i))
        .collect();
    let demand_set: HashSet<&str> = eligibility
        .values()
        .flatten()
        .map(String::as_str)
        .filter(|j| queue_pos.contains_key(j))
        .collect();
    let mut demand = demand_set.len() as u64;
    let mut served: HashSet<&str> = HashSet::new();
    let mut budget = policy.budget_remaining;
    let walltime = policy.expected_job_walltime_s;
    let mut out = Vec::new();

    for fom in ranked {
        if demand == 0 || budget.is_zero() {
            break;
        }
        let (Some(entry), Some(eligible)) = (
            entries.iter().find(|e| e.entry_id == fom.entry_id),
            eligibility.get(&fom.entry_id),
        ) else {
            continue;
        };
        if entry.state != EntryState::Up {
            continue;
        }
        let mut unserved: Vec<&str> = eligible
            .iter()
            .map(String::as_str)
            .filter(|j| queue_pos.contains_key(j) && !served.contains(j))
            .collect();
        unserved.sort_by_key(|j| queue_pos[j]);
        unserved.dedup();

        let mut slots = (unserved.len() as u64)
            .min(policy.per_entry_max_request)
            .min(entry.free_slots());
        if let (ProviderKind::Hpc, Some(h)) =
            (entry.provider_kind, entry.allocation_core_hours_remaining)
        {
            let remaining_core_s = (h * 3600.0).round().max(0.0) as u64;
            let per_slot = entry.slot_cores.saturating_mul(walltime);
            if let Some(n) = remaining_core_s.checked_div(per_slot) {
                slots = slots.min(n);
            }
        }
        slots = entry.affordable_slots(budget, walltime, slots);
        if slots == 0 {
            continue;
        }
        let cost = entry.request_cost(slots, walltime);
        for j in unserved.iter().take(slots as usize) {
            served.insert(j);
        }
        demand -= slots;
        budget -= cost;
        out.push(ResourceRequest {
            entry_id: entry.entry_id.clone(),
            slots,
            projected_cost: cost,
            fom_value: fom.value,
        });
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    pub cycle_id: u64,
    pub entry_id: String,
    /// True when this (cycle, entry) was already accepted; nothing changed.
    pub duplicate: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublishReceipt {
    pub acks: Vec<Ack>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SinkError {
    #[error("provisioner sink unavailable: {0}")]
    Unavailable(String),
    #[error("provisioner sink rejected the batch: {0}")]
    Rejected(String),
}

/// Receiving end of resource requests.
pub trait ProvisionerSink {
    fn accept(&mut self, requests: &[RequestRecord]) -> Result<Vec<Ack>, SinkError>;
}

impl fmt::Debug for dyn ProvisionerSink + Send {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("ProvisionerSink")
    }
}

pub fn publish_requests(
    requests: &[RequestRecord],
    sink: &mut dyn ProvisionerSink,
) -> Result<PublishReceipt, SinkError> {
    Ok(PublishReceipt {
        acks: sink.accept(requests)?,
    })
}
