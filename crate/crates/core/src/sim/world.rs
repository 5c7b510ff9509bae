use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex, MutexGuard};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::scenario::{PolicySpec, ProviderSpec, Scenario};
use crate::datablock::{Payload, SimTime};
use crate::decision_log::RequestRecord;
use crate::money::Money;
use crate::provisioning::{
    Ack, EntryState, Job, JobState, PolicyParams, ProviderKind, ProvisionerSink, ResourceEntry,
    SinkError,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("scripted outage of `{target}` at t={at}")]
    ScriptedOutage { target: String, at: SimTime },
    #[error("no provider named `{0}`")]
    UnknownProvider(String),
}

/// Jitter draw u(t) in [-1, 1] for one provider. Depends only on
/// (seed, stream, t), so sampling order does not matter.
pub fn jitter_draw(seed: u64, stream: u64, t: SimTime) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(u128::from(t) * 2);
    let x = rng.next_u64() >> 11;
    x as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

/// A sink ledger line: the request wire record plus the channel it came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub channel_id: String,
    #[serde(flatten)]
    pub request: RequestRecord,
}

#[derive(Clone, Debug)]
struct SimJob {
    job: Job,
    entry: Option<String>,
    finish_at: Option<SimTime>,
}

#[derive(Clone, Debug)]
struct ProviderState {
    spec: ProviderSpec,
    fulfilled: u64,
    allocation_core_s: u64,
    allocation_used_core_s: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobCounts {
    pub idle: usize,
    pub running: usize,
    pub done: usize,
}

/// Deterministic stand-in for the job queue, the providers and the
/// provisioner. Only `advance_to` and the sink mutate it.
#[derive(Clone, Debug)]
pub struct SimWorld {
    seed: u64,
    now: SimTime,
    policy: PolicySpec,
    jobs: Vec<SimJob>,
    providers: Vec<ProviderState>,
    outages: Vec<(super::scenario::Outage, u32)>,
    ledger: Vec<LedgerEntry>,
    accepted: BTreeSet<(String, u64, String)>,
    spent: Money,
}

impl SimWorld {
    pub fn new(scenario: &Scenario, seed: u64) -> Self {
        let jobs = scenario
            .expand_jobs()
            .into_iter()
            .map(|j| SimJob {
                job: Job {
                    job_id: j.job_id,
                    cores: j.cores,
                    memory_mb: j.memory_mb,
                    max_walltime_s: j.max_walltime_s,
                    site_whitelist: j.site_whitelist,
                    state: JobState::Idle,
                },
                entry: None,
                finish_at: None,
            })
            .collect();
        let providers = scenario
            .providers
            .iter()
            .map(|p| ProviderState {
                spec: p.clone(),
                fulfilled: 0,
                allocation_core_s: p
                    .allocation_core_hours
                    .map_or(0, |h| (h * 3600.0).round().max(0.0) as u64),
                allocation_used_core_s: 0,
            })
            .collect();
        Self {
            seed,
            now: 0,
            policy: scenario.policy.clone(),
            jobs,
            providers,
            outages: scenario.outages.iter().cloned().map(|o| (o, 0)).collect(),
            ledger: Vec::new(),
            accepted: BTreeSet::new(),
            spent: Money::ZERO,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    /// Moves simulated time forward and completes every running job whose
    /// walltime has elapsed.
    pub fn advance_to(&mut self, t: SimTime) {
        self.now = self.now.max(t);
        let now = self.now;
        for j in &mut self.jobs {
            if j.job.state == JobState::Running && j.finish_at.is_some_and(|f| f <= now) {
                j.job.state = JobState::Done;
                if let Some(entry) = j.entry.as_deref() {
                    if let Some(p) = self
                        .providers
                        .iter_mut()
                        .find(|p| p.spec.entry_id() == entry)
                    {
                        p.fulfilled -= 1;
                    }
                }
            }
        }
    }

    /// Fails if an outage window for `target` covers `now`. Outages with
    /// `max_failures` stop failing once that many calls have failed.
    pub fn check_outage(&mut self, target: &str, now: SimTime) -> Result<(), SimError> {
        for (outage, failures) in &mut self.outages {
            if outage.target != target || !outage.window().contains(now) {
                continue;
            }
            if outage.max_failures.is_none_or(|m| *failures < m) {
                *failures += 1;
                return Err(SimError::ScriptedOutage {
                    target: target.to_string(),
                    at: now,
                });
            }
        }
        Ok(())
    }

    pub fn jobs(&self) -> Vec<Job> {
        self.jobs.iter().map(|j| j.job.clone()).collect()
    }

    pub fn job_table(&self) -> Payload {
        Payload::Table(self.jobs.iter().map(|j| j.job.to_record()).collect())
    }

    pub fn job_counts(&self) -> JobCounts {
        let mut c = JobCounts::default();
        for j in &self.jobs {
            match j.job.state {
                JobState::Idle => c.idle += 1,
                JobState::Running => c.running += 1,
                JobState::Done => c.done += 1,
            }
        }
        c
    }

    pub fn provider_names(&self) -> Vec<String> {
        self.providers.iter().map(|p| p.spec.name.clone()).collect()
    }

    fn provider_index(&self, name: &str) -> Result<usize, SimError> {
        self.providers
            .iter()
            .position(|p| p.spec.name == name)
            .ok_or_else(|| SimError::UnknownProvider(name.to_string()))
    }

    pub fn price(&self, provider: &str, t: SimTime) -> Result<f64, SimError> {
        let idx = self.provider_index(provider)?;
        let u = jitter_draw(self.seed, idx as u64, t);
        Ok(self.providers[idx].spec.price.price(t, u))
    }

    /// The entry as a provider would report it at `t`.
    pub fn provider_entry(&self, provider: &str, t: SimTime) -> Result<ResourceEntry, SimError> {
        let idx = self.provider_index(provider)?;
        let p = &self.providers[idx];
        let down = p.spec.down.iter().any(|w| w.contains(t));
        Ok(ResourceEntry {
            entry_id: p.spec.entry_id().to_string(),
            provider: p.spec.name.clone(),
            provider_kind: p.spec.kind,
            slot_cores: p.spec.slot_cores,
            slot_memory_mb: p.spec.slot_memory_mb,
            price_per_core_hour: self.price(provider, t)?,
            performance_score: p.spec.performance_score,
            occupancy: p.fulfilled as f64 / p.spec.max_slots as f64,
            state: if down {
                EntryState::Down
            } else {
                EntryState::Up
            },
            max_slots: p.spec.max_slots,
            allocation_core_hours_remaining: (p.spec.kind == ProviderKind::Hpc).then(|| {
                p.allocation_core_s.saturating_sub(p.allocation_used_core_s) as f64 / 3600.0
            }),
        })
    }

    pub fn initial_budget(&self) -> Money {
        self.policy.budget
    }

    pub fn spent(&self) -> Money {
        self.spent
    }

    pub fn policy(&self) -> PolicyParams {
        PolicyParams {
            budget_remaining: self.policy.budget.saturating_sub(self.spent),
            per_entry_max_request: self.policy.per_entry_max_request,
            expected_job_walltime_s: self.policy.expected_job_walltime_s,
        }
    }

    pub fn ledger(&self) -> &[LedgerEntry] {
        &self.ledger
    }

    pub fn ledger_spend(&self) -> Money {
        self.ledger.iter().map(|e| e.request.projected_cost).sum()
    }

    pub fn fulfilled_slots(&self, entry_id: &str) -> Option<u64> {
        self.providers
            .iter()
            .find(|p| p.spec.entry_id() == entry_id)
            .map(|p| p.fulfilled)
    }

    /// Allocation granted and used so far, in core-seconds.
    pub fn allocation_core_s(&self, entry_id: &str) -> Option<(u64, u64)> {
        self.providers
            .iter()
            .find(|p| p.spec.entry_id() == entry_id && p.spec.kind == ProviderKind::Hpc)
            .map(|p| (p.allocation_core_s, p.allocation_used_core_s))
    }

    /// Provisioner endpoint. The batch is checked as a whole against
    /// capacity, budget and allocation; nothing is applied unless every new
    /// request fits. Requests already accepted for the same
    /// (channel, cycle, entry) are acknowledged as duplicates and ignored.
    pub fn accept(
        &mut self,
        channel_id: &str,
        requests: &[RequestRecord],
    ) -> Result<Vec<Ack>, SinkError> {
        let now = self.now;
        self.check_outage("sink", now)
            .map_err(|e| SinkError::Unavailable(e.to_string()))?;

        let key = |r: &RequestRecord| (channel_id.to_string(), r.cycle_id, r.entry_id.clone());
        let mut batch_keys = BTreeSet::new();
        let mut fresh = Vec::new();
        for r in requests {
            let k = key(r);
            if !self.accepted.contains(&k) && batch_keys.insert(k) {
                fresh.push(r);
            }
        }

        let mut slots_by_idx: BTreeMap<usize, u64> = BTreeMap::new();
        let mut cost = Money::ZERO;
        for r in &fresh {
            let idx = self
                .providers
                .iter()
                .position(|p| p.spec.entry_id() == r.entry_id)
                .ok_or_else(|| SinkError::Rejected(format!("unknown entry `{}`", r.entry_id)))?;
            if self.providers[idx]
                .spec
                .down
                .iter()
                .any(|w| w.contains(now))
            {
                return Err(SinkError::Rejected(format!(
                    "entry `{}` is down",
                    r.entry_id
                )));
            }
            if r.slots == 0 {
                return Err(SinkError::Rejected(format!(
                    "zero-slot request for `{}`",
                    r.entry_id
                )));
            }
            *slots_by_idx.entry(idx).or_default() += r.slots;
            cost += r.projected_cost;
        }
        if cost > self.policy.budget.saturating_sub(self.spent) {
            return Err(SinkError::Rejected(format!(
                "batch cost {cost} exceeds remaining budget {}",
                self.policy.budget.saturating_sub(self.spent)
            )));
        }
        let walltime = self.policy.expected_job_walltime_s;
        for (&idx, &slots) in &slots_by_idx {
            let p = &self.providers[idx];
            if p.fulfilled + slots > p.spec.max_slots {
                return Err(SinkError::Rejected(format!(
                    "entry `{}` has {} free slots, asked for {slots}",
                    p.spec.entry_id(),
                    p.spec.max_slots - p.fulfilled
                )));
            }
            if p.spec.kind == ProviderKind::Hpc {
                let need = slots * p.spec.slot_cores * walltime;
                if p.allocation_used_core_s + need > p.allocation_core_s {
                    return Err(SinkError::Rejected(format!(
                        "entry `{}` allocation exhausted",
                        p.spec.entry_id()
                    )));
                }
            }
        }

        // apply
        let mut acks = Vec::with_capacity(requests.len());
        let fresh_keys: BTreeSet<_> = fresh.iter().map(|r| key(r)).collect();
        let mut applied = BTreeSet::new();
        for r in requests {
            let k = key(r);
            let is_new = fresh_keys.contains(&k) && applied.insert(k.clone());
            if is_new {
                self.start(r, now);
                self.accepted.insert(k);
                self.spent += r.projected_cost;
                self.ledger.push(LedgerEntry {
                    channel_id: channel_id.to_string(),
                    request: r.clone(),
                });
            }
            acks.push(Ack {
                cycle_id: r.cycle_id,
                entry_id: r.entry_id.clone(),
                duplicate: !is_new,
            });
        }
        Ok(acks)
    }

    /// Binds up to `slots` idle jobs that fit the entry, in queue order.
    /// Slots with no job to run are released straight away.
    fn start(&mut self, r: &RequestRecord, now: SimTime) {
        let idx = self
            .providers
            .iter()
            .position(|p| p.spec.entry_id() == r.entry_id)
            .expect("checked before apply");
        let entry = self
            .provider_entry(&self.providers[idx].spec.name.clone(), now)
            .expect("known provider");
        let mut bound = 0;
        for j in &mut self.jobs {
            if bound == r.slots {
                break;
            }
            if j.job.state == JobState::Idle && j.job.fits(&entry) {
                j.job.state = JobState::Running;
                j.entry = Some(r.entry_id.clone());
                j.finish_at = Some(now + j.job.max_walltime_s);
                bound += 1;
            }
        }
        let p = &mut self.providers[idx];
        p.fulfilled += bound;
        if p.spec.kind == ProviderKind::Hpc {
            p.allocation_used_core_s +=
                r.slots * p.spec.slot_cores * self.policy.expected_job_walltime_s;
        }
    }
}

/// Shared handle used by the simulated sources and the sink.
#[derive(Clone, Debug)]
pub struct SimHandle(Arc<Mutex<SimWorld>>);

impl SimHandle {
    pub fn new(world: SimWorld) -> Self {
        Self(Arc::new(Mutex::new(world)))
    }

    pub fn lock(&self) -> MutexGuard<'_, SimWorld> {
        self.0.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// A sink bound to one channel's requests.
    pub fn sink(&self, channel_id: &str) -> SimSink {
        SimSink {
            world: self.clone(),
            channel_id: channel_id.to_string(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SimSink {
    world: SimHandle,
    channel_id: String,
}

impl ProvisionerSink for SimSink {
    fn accept(&mut self, requests: &[RequestRecord]) -> Result<Vec<Ack>, SinkError> {
        self.world.lock().accept(&self.channel_id, requests)
    }
}
