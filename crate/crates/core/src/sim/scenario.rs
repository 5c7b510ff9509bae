//! Scenario files: the scripted world a run is simulated against.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datablock::{is_identifier, SimTime};
use crate::money::Money;
use crate::provisioning::ProviderKind;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub policy: PolicySpec,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub jobs: Vec<JobSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub job_batches: Vec<JobBatch>,
    pub providers: Vec<ProviderSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub outages: Vec<Outage>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySpec {
    pub budget: Money,
    pub per_entry_max_request: u64,
    pub expected_job_walltime_s: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobSpec {
    pub job_id: String,
    pub cores: u64,
    pub memory_mb: u64,
    pub max_walltime_s: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub site_whitelist: Option<Vec<String>>,
}

/// `count` identical jobs named `<prefix>_<n>` with n zero-padded.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobBatch {
    pub prefix: String,
    pub count: u64,
    pub cores: u64,
    pub memory_mb: u64,
    pub max_walltime_s: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub site_whitelist: Option<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderSpec {
    pub name: String,
    pub kind: ProviderKind,
    /// Defaults to the provider name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entry_id: Option<String>,
    pub slot_cores: u64,
    pub slot_memory_mb: u64,
    pub performance_score: f64,
    pub max_slots: u64,
    /// Required for hpc, rejected otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub allocation_core_hours: Option<f64>,
    pub price: PriceProcess,
    /// Windows during which the entry reports `down`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub down: Vec<Window>,
}

impl ProviderSpec {
    pub fn entry_id(&self) -> &str {
        self.entry_id.as_deref().unwrap_or(&self.name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriceProcess {
    pub base_price: f64,
    #[serde(default)]
    pub amplitude: f64,
    #[serde(default = "default_price_period")]
    pub period_s: u64,
    #[serde(default)]
    pub jitter: f64,
}

fn default_price_period() -> u64 {
    86_400
}

impl PriceProcess {
    pub fn constant(base_price: f64) -> Self {
        Self {
            base_price,
            amplitude: 0.0,
            period_s: default_price_period(),
            jitter: 0.0,
        }
    }

    /// Price at `t` given the jitter draw `u` in [-1, 1], clamped at zero.
    pub fn price(&self, t: SimTime, u: f64) -> f64 {
        let phase = 2.0 * std::f64::consts::PI * t as f64 / self.period_s as f64;
        (self.base_price * (1.0 + self.amplitude * phase.sin() + self.jitter * u)).max(0.0)
    }
}

/// Half-open `[from_s, until_s)`; no `until_s` means forever.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Window {
    pub from_s: SimTime,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub until_s: Option<SimTime>,
}

impl Window {
    pub fn contains(&self, t: SimTime) -> bool {
        t >= self.from_s && self.until_s.is_none_or(|u| t < u)
    }
}

/// Scripted failure of one external system.
///
/// `target` is `job_queue`, `policy`, `sink` or `provider:<name>`. With
/// `max_failures`, only that many calls inside the window fail.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Outage {
    pub target: String,
    pub from_s: SimTime,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub until_s: Option<SimTime>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_failures: Option<u32>,
}

impl Outage {
    pub fn window(&self) -> Window {
        Window {
            from_s: self.from_s,
            until_s: self.until_s,
        }
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("scenario {path}: {message}")]
    Invalid { path: String, message: String },
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text).map_err(|message| ScenarioError::Invalid {
            path: path.display().to_string(),
            message,
        })
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let scenario: Scenario = toml::from_str(text).map_err(|e| e.to_string())?;
        scenario.check()?;
        Ok(scenario)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    fn check(&self) -> Result<(), String> {
        let p = &self.policy;
        if p.budget < Money::ZERO || p.per_entry_max_request == 0 || p.expected_job_walltime_s == 0
        {
            return Err(
                "policy: budget must be >= 0, per_entry_max_request and walltime positive".into(),
            );
        }
        let mut ids = std::collections::BTreeSet::new();
        for j in self.expand_jobs() {
            if !is_identifier(&j.job_id) {
                return Err(format!("job id `{}` is not an identifier", j.job_id));
            }
            if j.cores == 0 || j.memory_mb == 0 || j.max_walltime_s == 0 {
                return Err(format!(
                    "job `{}` needs positive cores, memory and walltime",
                    j.job_id
                ));
            }
            if !ids.insert(j.job_id.clone()) {
                return Err(format!("duplicate job id `{}`", j.job_id));
            }
        }
        let mut names = std::collections::BTreeSet::new();
        let mut entry_ids = std::collections::BTreeSet::new();
        for pr in &self.providers {
            let ctx = format!("provider `{}`", pr.name);
            if !is_identifier(&pr.name) || !is_identifier(pr.entry_id()) {
                return Err(format!("{ctx}: name and entry_id must be identifiers"));
            }
            if !names.insert(pr.name.clone()) || !entry_ids.insert(pr.entry_id().to_string()) {
                return Err(format!("{ctx}: duplicate provider name or entry id"));
            }
            if pr.slot_cores == 0 || pr.slot_memory_mb == 0 || pr.max_slots == 0 {
                return Err(format!(
                    "{ctx}: slot_cores, slot_memory_mb and max_slots must be positive"
                ));
            }
            if !(pr.performance_score.is_finite() && pr.performance_score > 0.0) {
                return Err(format!("{ctx}: performance_score must be positive"));
            }
            match (pr.kind, pr.allocation_core_hours) {
                (ProviderKind::Hpc, Some(a)) if a.is_finite() && a >= 0.0 => {}
                (ProviderKind::Hpc, _) => {
                    return Err(format!("{ctx}: hpc needs allocation_core_hours >= 0"))
                }
                (_, Some(_)) => {
                    return Err(format!("{ctx}: allocation_core_hours is for hpc only"))
                }
                (_, None) => {}
            }
            let pp = &pr.price;
            if !(pp.base_price.is_finite() && pp.base_price >= 0.0)
                || !(0.0..1.0).contains(&pp.amplitude)
                || !(0.0..=0.2).contains(&pp.jitter)
                || pp.period_s == 0
            {
                return Err(format!(
                    "{ctx}: price needs base_price >= 0, amplitude in [0,1), jitter in [0,0.2], period_s > 0"
                ));
            }
        }
        for o in &self.outages {
            let ok = match o.target.strip_prefix("provider:") {
                Some(name) => names.contains(name),
                None => matches!(o.target.as_str(), "job_queue" | "policy" | "sink"),
            };
            if !ok {
                return Err(format!("outage target `{}` is unknown", o.target));
            }
        }
        Ok(())
    }

    /// Explicit jobs first, then batches, in file order.
    pub fn expand_jobs(&self) -> Vec<JobSpec> {
        let mut out = self.jobs.clone();
        for b in &self.job_batches {
            let width = b.count.saturating_sub(1).to_string().len().max(3);
            for n in 0..b.count {
                out.push(JobSpec {
                    job_id: format!("{}_{:0width$}", b.prefix, n),
                    cores: b.cores,
                    memory_mb: b.memory_mb,
                    max_walltime_s: b.max_walltime_s,
                    site_whitelist: b.site_whitelist.clone(),
                });
            }
        }
        out
    }
}
