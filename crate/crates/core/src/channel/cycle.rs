//! Channel runtime: lifecycle state and the per-cycle driver.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, warn};

use super::module::{
    ModuleError, ModuleSpec, Produced, PublishContext, Publisher, Source, Transform,
};
use super::validate::{transform_order, ChannelSpec, CycleDetected};
use crate::datablock::{DataBlock, DataBlockSnapshot, SimTime};
use crate::decision_log::RequestRecord;
use crate::logic::{evaluate_facts, forward_chain, EvaluationResult, FactValue};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelState {
    Boot,
    Steady,
    Offline,
    Error,
}

impl fmt::Display for ChannelState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChannelState::Boot => "boot",
            ChannelState::Steady => "steady",
            ChannelState::Offline => "offline",
            ChannelState::Error => "error",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelStatus {
    pub channel_id: String,
    pub state: ChannelState,
    pub cycle_id: u64,
    pub last_error: Option<String>,
}

/// Simulated clock. Only moves forward.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Clock {
    now_s: SimTime,
}

impl Clock {
    pub fn new(start: SimTime) -> Self {
        Self { now_s: start }
    }

    pub fn now(&self) -> SimTime {
        self.now_s
    }

    /// Moves the clock to `t`; earlier times are ignored.
    pub fn advance_to(&mut self, t: SimTime) {
        self.now_s = self.now_s.max(t);
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WrittenProduct {
    pub name: String,
    pub generation: u64,
    pub producer: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsumedProduct {
    pub product: String,
    pub generation: u64,
    pub digest: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PublishStatus {
    Published,
    Failed,
    None,
}

impl fmt::Display for PublishStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PublishStatus::Published => "published",
            PublishStatus::Failed => "failed",
            PublishStatus::None => "none",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PublisherReport {
    pub publisher: String,
    pub status: PublishStatus,
    pub requests: Vec<RequestRecord>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CycleOutcome {
    Completed,
    SourceFailure {
        module: String,
        attempts: u32,
        message: String,
    },
    TransformFailure {
        module: String,
        message: String,
    },
    MissingInput {
        module: String,
        product: String,
    },
}

impl CycleOutcome {
    pub fn is_completed(&self) -> bool {
        matches!(self, CycleOutcome::Completed)
    }
}

impl fmt::Display for CycleOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CycleOutcome::Completed => f.write_str("completed"),
            CycleOutcome::SourceFailure {
                module,
                attempts,
                message,
            } => {
                write!(
                    f,
                    "source `{module}` failed after {attempts} attempts: {message}"
                )
            }
            CycleOutcome::TransformFailure { module, message } => {
                write!(f, "transform `{module}` failed: {message}")
            }
            CycleOutcome::MissingInput { module, product } => {
                write!(f, "module `{module}` is missing input `{product}`")
            }
        }
    }
}

/// Everything one cycle did, in a serializable, replay-comparable form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleReport {
    pub channel_id: String,
    pub cycle_id: u64,
    pub sim_time_s: SimTime,
    pub outcome: CycleOutcome,
    pub sources_run: Vec<String>,
    pub products_written: Vec<WrittenProduct>,
    pub consumed: Vec<ConsumedProduct>,
    pub evaluation: EvaluationResult,
    pub publishers: Vec<PublisherReport>,
    pub incidents: Vec<String>,
    pub state_after: ChannelState,
}

impl CycleReport {
    pub fn publish_status(&self) -> PublishStatus {
        if self.publishers.is_empty() {
            PublishStatus::None
        } else if self
            .publishers
            .iter()
            .all(|p| p.status == PublishStatus::Published)
        {
            PublishStatus::Published
        } else {
            PublishStatus::Failed
        }
    }

    /// Requests from every publisher, in invocation order.
    pub fn requests(&self) -> impl Iterator<Item = &RequestRecord> {
        self.publishers.iter().flat_map(|p| p.requests.iter())
    }

    /// Declared fact values merged with derived facts.
    pub fn all_fact_values(&self) -> BTreeMap<String, FactValue> {
        let mut out = self.evaluation.fact_values.clone();
        for (k, v) in &self.evaluation.derived_facts {
            out.insert(k.clone(), FactValue::from_bool(*v));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChannelError {
    #[error("channel `{channel}` is {state} and cannot run")]
    NotRunnable {
        channel: String,
        state: ChannelState,
    },
    #[error(transparent)]
    Cycle(#[from] CycleDetected),
    #[error("module `{0}` has no instance of the right kind")]
    MissingInstance(String),
}

struct SourceSlot {
    spec: ModuleSpec,
    module: Box<dyn Source>,
    next_due: Option<SimTime>,
    validity_s: u64,
}

struct TransformSlot {
    spec: ModuleSpec,
    module: Box<dyn Transform>,
    validity_s: u64,
}

struct PublisherSlot {
    spec: ModuleSpec,
    module: Box<dyn Publisher>,
}

/// Instances supplied by the caller, keyed by module name.
#[derive(Default)]
pub struct ChannelModules {
    pub sources: BTreeMap<String, Box<dyn Source>>,
    pub transforms: BTreeMap<String, Box<dyn Transform>>,
    pub publishers: BTreeMap<String, Box<dyn Publisher>>,
}

/// An assembled, runnable decision channel.
pub struct Channel {
    spec: ChannelSpec,
    sources: Vec<SourceSlot>,
    transforms: Vec<TransformSlot>,
    publishers: Vec<PublisherSlot>,
    status: ChannelStatus,
}

impl fmt::Debug for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Channel")
            .field("status", &self.status)
            .finish_non_exhaustive()
    }
}

fn validity_param(spec: &ModuleSpec, default: u64) -> u64 {
    match spec.params.u64("validity_s") {
        Ok(Some(v)) if v > 0 => v,
        _ => default,
    }
}

impl Channel {
    /// Binds module instances to a validated spec.
    pub fn new(spec: ChannelSpec, mut modules: ChannelModules) -> Result<Self, ChannelError> {
        let period = spec.channel_period_s.max(1);
        let mut sources = Vec::new();
        for s in &spec.sources {
            let module = modules
                .sources
                .remove(&s.name)
                .ok_or_else(|| ChannelError::MissingInstance(s.name.clone()))?;
            let source_period = s.period_s.unwrap_or(period);
            sources.push(SourceSlot {
                spec: s.clone(),
                module,
                next_due: None,
                validity_s: validity_param(s, source_period.saturating_mul(2)),
            });
        }
        let mut transforms = Vec::new();
        for name in transform_order(&spec)? {
            let s = spec
                .transforms
                .iter()
                .find(|t| t.name == name)
                .expect("transform_order yields declared names");
            let module = modules
                .transforms
                .remove(&name)
                .ok_or_else(|| ChannelError::MissingInstance(name.clone()))?;
            transforms.push(TransformSlot {
                spec: s.clone(),
                module,
                validity_s: validity_param(s, period),
            });
        }
        let mut publishers = Vec::new();
        for p in &spec.publishers {
            let module = modules
                .publishers
                .remove(&p.name)
                .ok_or_else(|| ChannelError::MissingInstance(p.name.clone()))?;
            publishers.push(PublisherSlot {
                spec: p.clone(),
                module,
            });
        }
        let status = ChannelStatus {
            channel_id: spec.channel_id.clone(),
            state: ChannelState::Boot,
            cycle_id: 0,
            last_error: None,
        };
        Ok(Self {
            spec,
            sources,
            transforms,
            publishers,
            status,
        })
    }

    pub fn spec(&self) -> &ChannelSpec {
        &self.spec
    }

    pub fn id(&self) -> &str {
        &self.spec.channel_id
    }

    pub fn status(&self) -> &ChannelStatus {
        &self.status
    }

    pub fn is_runnable(&self) -> bool {
        matches!(self.status.state, ChannelState::Boot | ChannelState::Steady)
    }

    /// Operator stop.
    pub fn stop(&mut self) {
        self.status.state = ChannelState::Offline;
    }

    fn store(
        &self,
        datablock: &DataBlock,
        producer: &ModuleSpec,
        outputs: Vec<Produced>,
        default_validity: u64,
        now: SimTime,
        written: &mut Vec<WrittenProduct>,
    ) -> Result<Vec<crate::datablock::DataProduct>, ModuleError> {
        let declared: BTreeSet<&str> = producer.produces.iter().map(String::as_str).collect();
        let emitted: BTreeSet<&str> = outputs.iter().map(|p| p.name.as_str()).collect();
        if declared != emitted || emitted.len() != outputs.len() {
            return Err(ModuleError(format!(
                "produced {:?} but declares {:?}",
                emitted, declared
            )));
        }
        let mut stored = Vec::with_capacity(outputs.len());
        for out in outputs {
            let validity = out.validity_s.unwrap_or(default_validity);
            let product = datablock
                .put_product(
                    &self.spec.channel_id,
                    &out.name,
                    out.payload,
                    validity,
                    &producer.name,
                    now,
                )
                .map_err(|e| ModuleError(e.to_string()))?;
            written.push(WrittenProduct {
                name: out.name,
                generation: product.header.generation,
                producer: producer.name.clone(),
            });
            stored.push(product);
        }
        Ok(stored)
    }

    /// Runs one gather, transform, infer, publish cycle at `clock.now()`.
    pub fn run_cycle(
        &mut self,
        clock: &Clock,
        datablock: &DataBlock,
    ) -> Result<CycleReport, ChannelError> {
        if !self.is_runnable() {
            return Err(ChannelError::NotRunnable {
                channel: self.spec.channel_id.clone(),
                state: self.status.state,
            });
        }
        let now = clock.now();
        let cycle_id = self.status.cycle_id;
        let mut report = CycleReport {
            channel_id: self.spec.channel_id.clone(),
            cycle_id,
            sim_time_s: now,
            outcome: CycleOutcome::Completed,
            sources_run: Vec::new(),
            products_written: Vec::new(),
            consumed: Vec::new(),
            evaluation: EvaluationResult::default(),
            publishers: Vec::new(),
            incidents: Vec::new(),
            state_after: self.status.state,
        };
        self.status.cycle_id += 1;

        // 1. sources that are due
        let boot = self.status.state == ChannelState::Boot;
        let attempts_allowed = self.spec.source_retry_cap + 1;
        for i in 0..self.sources.len() {
            let due = boot || self.sources[i].next_due.is_none_or(|t| t <= now);
            if !due {
                continue;
            }
            let mut last_err = String::new();
            let mut stored = false;
            for attempt in 1..=attempts_allowed {
                let slot = &mut self.sources[i];
                let result = slot.module.fetch(now);
                let spec = slot.spec.clone();
                let validity = slot.validity_s;
                match result.and_then(|outputs| {
                    self.store(
                        datablock,
                        &spec,
                        outputs,
                        validity,
                        now,
                        &mut report.products_written,
                    )
                }) {
                    Ok(_) => {
                        stored = true;
                        break;
                    }
                    Err(e) => {
                        debug!(source = %spec.name, attempt, error = %e, "source fetch failed");
                        report
                            .incidents
                            .push(format!("source `{}` attempt {attempt}: {e}", spec.name));
                        last_err = e.0;
                    }
                }
            }
            let slot = &mut self.sources[i];
            if !stored {
                warn!(channel = %self.spec.channel_id, source = %slot.spec.name, "source exhausted retries");
                let outcome = CycleOutcome::SourceFailure {
                    module: slot.spec.name.clone(),
                    attempts: attempts_allowed,
                    message: last_err,
                };
                self.status.state = ChannelState::Error;
                self.status.last_error = Some(outcome.to_string());
                report.outcome = outcome;
                report.state_after = self.status.state;
                return Ok(report);
            }
            let period = slot.spec.period_s.unwrap_or(self.spec.channel_period_s);
            slot.next_due = Some(now + period);
            report.sources_run.push(slot.spec.name.clone());
        }

        // 2. one snapshot for the whole cycle
        let mut working: DataBlockSnapshot =
            datablock.snapshot(&self.spec.channel_id, cycle_id, now);

        // 3. transforms in dependency order, each output visible to dependents
        for i in 0..self.transforms.len() {
            let spec = self.transforms[i].spec.clone();
            let inputs = match working.restrict(&spec.consumes) {
                Ok(v) => v,
                Err(product) => {
                    return Ok(self.abort(
                        report,
                        CycleOutcome::MissingInput {
                            module: spec.name,
                            product,
                        },
                    ));
                }
            };
            let validity = self.transforms[i].validity_s;
            let result = self.transforms[i]
                .module
                .transform(&inputs)
                .and_then(|outputs| {
                    self.store(
                        datablock,
                        &spec,
                        outputs,
                        validity,
                        now,
                        &mut report.products_written,
                    )
                });
            match result {
                Ok(products) => {
                    for p in products {
                        working.insert(p);
                    }
                }
                Err(e) => {
                    return Ok(self.abort(
                        report,
                        CycleOutcome::TransformFailure {
                            module: spec.name,
                            message: e.0,
                        },
                    ));
                }
            }
        }
        report.consumed = working
            .products()
            .map(|p| ConsumedProduct {
                product: p.key.name.clone(),
                generation: p.header.generation,
                digest: p.digest().to_string(),
            })
            .collect();

        // 4. logic engine
        let facts = evaluate_facts(&self.spec.facts, &working);
        report
            .incidents
            .extend(facts.incidents.iter().map(ToString::to_string));
        let evaluation = forward_chain(&self.spec.rules, &facts.values);

        // 5. publishers named by fired rules
        for action in &evaluation.triggered_actions {
            let Some(slot) = self.publishers.iter_mut().find(|p| &p.spec.name == action) else {
                report
                    .incidents
                    .push(format!("action `{action}` names no publisher"));
                continue;
            };
            let mut entry = PublisherReport {
                publisher: slot.spec.name.clone(),
                status: PublishStatus::Published,
                requests: Vec::new(),
                error: None,
            };
            match working.restrict(&slot.spec.consumes) {
                Err(product) => {
                    entry.status = PublishStatus::Failed;
                    entry.error = Some(format!("missing input `{product}`"));
                }
                Ok(inputs) => {
                    let triggered_by: Vec<String> = evaluation
                        .fired_rules
                        .iter()
                        .filter(|r| {
                            self.spec
                                .rules
                                .iter()
                                .any(|rule| &rule.name == *r && rule.actions.contains(action))
                        })
                        .cloned()
                        .collect();
                    let ctx = PublishContext {
                        channel_id: &self.spec.channel_id,
                        cycle_id,
                        now,
                        inputs: &inputs,
                        evaluation: &evaluation,
                        triggered_by: &triggered_by,
                    };
                    match slot.module.publish(&ctx) {
                        Ok(requests) => entry.requests = requests,
                        Err(e) => {
                            entry.status = PublishStatus::Failed;
                            entry.error = Some(e.0);
                        }
                    }
                }
            }
            if let Some(err) = &entry.error {
                report
                    .incidents
                    .push(format!("publisher `{}`: {err}", entry.publisher));
            }
            report.publishers.push(entry);
        }
        report.evaluation = evaluation;

        // 6. lifecycle
        if self.status.state == ChannelState::Boot {
            self.status.state = ChannelState::Steady;
        }
        report.state_after = self.status.state;
        Ok(report)
    }

    fn abort(&mut self, mut report: CycleReport, outcome: CycleOutcome) -> CycleReport {
        warn!(channel = %self.spec.channel_id, cycle = report.cycle_id, %outcome, "cycle aborted");
        report.incidents.push(outcome.to_string());
        self.status.last_error = Some(outcome.to_string());
        report.outcome = outcome;
        report.state_after = self.status.state;
        report
    }
}
