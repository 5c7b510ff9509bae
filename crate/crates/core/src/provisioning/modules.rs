//! Channel modules wrapping the provisioning stages.

use crate::channel::{ModuleError, ModuleSpec, Produced, PublishContext, Publisher, Transform};
use crate::datablock::{DataBlockSnapshot, Payload, Record, Value};
use crate::decision_log::RequestRecord;
use crate::provisioning::{
    eligibility_from_payload, eligibility_to_payload, generate_requests, match_eligibility,
    publish_requests, rank_by_fom, Eligibility, FigureOfMerit, Job, PolicyParams, ProvisionerSink,
    ResourceEntry, ResourceRequest,
};

const ENTRIES_PREFIX: &str = "entries_";

/// Names of the products a provisioning transform reads.
#[derive(Clone, Debug)]
struct Inputs {
    jobs: String,
    eligibility: String,
    ranking: String,
    policy: String,
    output: String,
}

impl Inputs {
    fn from_spec(spec: &ModuleSpec) -> Result<Self, ModuleError> {
        let name = |key: &str, default: &str| -> Result<String, ModuleError> {
            Ok(spec.params.str(key)?.unwrap_or(default).to_string())
        };
        let [output] = spec.produces.as_slice() else {
            return Err(ModuleError(format!(
                "`{}` must produce exactly one product, declares {:?}",
                spec.name, spec.produces
            )));
        };
        Ok(Self {
            jobs: name("jobs", "jobs")?,
            eligibility: name("eligibility", "eligibility")?,
            ranking: name("ranking", "ranking")?,
            policy: name("policy", "policy")?,
            output: output.clone(),
        })
    }
}

fn payload<'a>(inputs: &'a DataBlockSnapshot, name: &str) -> Result<&'a Payload, ModuleError> {
    inputs
        .payload(name)
        .ok_or_else(|| ModuleError(format!("input `{name}` not available")))
}

fn jobs(inputs: &DataBlockSnapshot, name: &str) -> Result<Vec<Job>, ModuleError> {
    let table = payload(inputs, name)?
        .as_table()
        .ok_or_else(|| ModuleError(format!("`{name}` must be a table")))?;
    table
        .iter()
        .map(|r| Job::from_record(r).map_err(|e| ModuleError(e.to_string())))
        .collect()
}

/// Every consumed `entries_*` product, one entry per record (or per row).
fn entries(inputs: &DataBlockSnapshot) -> Result<Vec<ResourceEntry>, ModuleError> {
    let mut out = Vec::new();
    for product in inputs
        .products()
        .filter(|p| p.key.name.starts_with(ENTRIES_PREFIX))
    {
        let rows: Vec<&Record> = match product.payload() {
            Payload::Record(r) => vec![r],
            Payload::Table(rows) => rows.iter().collect(),
        };
        for r in rows {
            out.push(ResourceEntry::from_record(r).map_err(|e| ModuleError(e.to_string()))?);
        }
    }
    Ok(out)
}

fn ranking_from_payload(p: &Payload) -> Result<Vec<FigureOfMerit>, ModuleError> {
    let rows = p
        .as_table()
        .ok_or_else(|| ModuleError("ranking must be a table".into()))?;
    let mut ranked: Vec<(u64, FigureOfMerit)> = rows
        .iter()
        .map(|r| {
            let rank = r.get("rank").and_then(Value::as_f64);
            let id = r.get("entry_id").and_then(Value::as_str);
            let fom = r.get("fom").and_then(Value::as_f64);
            match (rank, id, fom) {
                (Some(rank), Some(id), Some(fom)) => Ok((
                    rank as u64,
                    FigureOfMerit {
                        entry_id: id.to_string(),
                        value: fom,
                    },
                )),
                _ => Err(ModuleError(format!("bad ranking row {r:?}"))),
            }
        })
        .collect::<Result<_, _>>()?;
    ranked.sort_by_key(|(rank, _)| *rank);
    Ok(ranked.into_iter().map(|(_, f)| f).collect())
}

/// Stage 1: idle jobs against up entries.
pub struct EligibilityTransform {
    names: Inputs,
}

impl EligibilityTransform {
    pub fn new(spec: &ModuleSpec) -> Result<Self, ModuleError> {
        Ok(Self {
            names: Inputs::from_spec(spec)?,
        })
    }
}

impl Transform for EligibilityTransform {
    fn transform(&mut self, inputs: &DataBlockSnapshot) -> Result<Vec<Produced>, ModuleError> {
        let elig = match_eligibility(&jobs(inputs, &self.names.jobs)?, &entries(inputs)?);
        Ok(vec![Produced::new(
            &self.names.output,
            eligibility_to_payload(&elig),
        )])
    }
}

/// Stage 2: rank entries that have at least one eligible job.
pub struct FomRankingTransform {
    names: Inputs,
}

impl FomRankingTransform {
    pub fn new(spec: &ModuleSpec) -> Result<Self, ModuleError> {
        Ok(Self {
            names: Inputs::from_spec(spec)?,
        })
    }
}

impl Transform for FomRankingTransform {
    fn transform(&mut self, inputs: &DataBlockSnapshot) -> Result<Vec<Produced>, ModuleError> {
        let elig: Eligibility = eligibility_from_payload(payload(inputs, &self.names.eligibility)?)
            .map_err(|e| ModuleError(e.to_string()))?;
        let candidates: Vec<ResourceEntry> = entries(inputs)?
            .into_iter()
            .filter(|e| elig.contains_key(&e.entry_id))
            .collect();
        let rows = rank_by_fom(&candidates)
            .into_iter()
            .enumerate()
            .map(|(i, f)| {
                Record::from([
                    ("rank".to_string(), Value::from(i as u64)),
                    ("entry_id".to_string(), Value::from(f.entry_id)),
                    ("fom".to_string(), Value::from(f.value)),
                ])
            })
            .collect();
        Ok(vec![Produced::new(
            &self.names.output,
            Payload::Table(rows),
        )])
    }
}

/// Stage 3: greedy, policy-limited requests.
pub struct RequestGenerationTransform {
    names: Inputs,
}

impl RequestGenerationTransform {
    pub fn new(spec: &ModuleSpec) -> Result<Self, ModuleError> {
        Ok(Self {
            names: Inputs::from_spec(spec)?,
        })
    }
}

impl Transform for RequestGenerationTransform {
    fn transform(&mut self, inputs: &DataBlockSnapshot) -> Result<Vec<Produced>, ModuleError> {
        let ranked = ranking_from_payload(payload(inputs, &self.names.ranking)?)?;
        let elig = eligibility_from_payload(payload(inputs, &self.names.eligibility)?)
            .map_err(|e| ModuleError(e.to_string()))?;
        let policy_rec = payload(inputs, &self.names.policy)?
            .as_record()
            .ok_or_else(|| ModuleError("policy must be a record".into()))?;
        let policy =
            PolicyParams::from_record(policy_rec).map_err(|e| ModuleError(e.to_string()))?;
        let reqs = generate_requests(
            &ranked,
            &elig,
            &jobs(inputs, &self.names.jobs)?,
            &entries(inputs)?,
            &policy,
        );
        let rows = reqs.iter().map(ResourceRequest::to_record).collect();
        Ok(vec![Produced::new(
            &self.names.output,
            Payload::Table(rows),
        )])
    }
}

/// Sends the cycle's `requests` table to a provisioner sink.
pub struct ProvisionerPublisher {
    requests: String,
    sink: Box<dyn ProvisionerSink + Send>,
}

impl ProvisionerPublisher {
    pub fn new(
        spec: &ModuleSpec,
        sink: Box<dyn ProvisionerSink + Send>,
    ) -> Result<Self, ModuleError> {
        let requests = match spec.params.str("requests")? {
            Some(n) => n.to_string(),
            None => match spec.consumes.as_slice() {
                [only] => only.clone(),
                _ => "requests".to_string(),
            },
        };
        Ok(Self { requests, sink })
    }
}

impl Publisher for ProvisionerPublisher {
    fn publish(&mut self, ctx: &PublishContext<'_>) -> Result<Vec<RequestRecord>, ModuleError> {
        let rows = payload(ctx.inputs, &self.requests)?
            .as_table()
            .ok_or_else(|| ModuleError(format!("`{}` must be a table", self.requests)))?;
        let records: Vec<RequestRecord> = rows
            .iter()
            .map(|r| {
                let req =
                    ResourceRequest::from_record(r).map_err(|e| ModuleError(e.to_string()))?;
                Ok(RequestRecord {
                    cycle_id: ctx.cycle_id,
                    entry_id: req.entry_id,
                    slots: req.slots,
                    projected_cost: req.projected_cost,
                    fom_value: req.fom_value,
                    fired_rules: ctx.triggered_by.to_vec(),
                })
            })
            .collect::<Result<_, ModuleError>>()?;
        let receipt = publish_requests(&records, self.sink.as_mut())
            .map_err(|e| ModuleError(e.to_string()))?;
        if receipt.acks.len() != records.len() {
            return Err(ModuleError(format!(
                "sink acknowledged {} of {} requests",
                receipt.acks.len(),
                records.len()
            )));
        }
        // duplicates were already counted when first accepted
        Ok(records
            .into_iter()
            .zip(receipt.acks)
            .filter(|(_, ack)| !ack.duplicate)
            .map(|(r, _)| r)
            .collect())
    }
}
