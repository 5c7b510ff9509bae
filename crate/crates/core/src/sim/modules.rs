use crate::channel::{ModuleError, ModuleSpec, Produced, Source};
use crate::datablock::{Payload, SimTime};

use super::world::SimHandle;

fn single_output(spec: &ModuleSpec) -> Result<String, ModuleError> {
    match spec.produces.as_slice() {
        [only] => Ok(only.clone()),
        other => Err(ModuleError(format!(
            "`{}` must produce exactly one product, declares {other:?}",
            spec.name
        ))),
    }
}

/// Reads the simulated job queue into a `jobs` table.
pub struct JobQueueSource {
    world: SimHandle,
    output: String,
}

impl JobQueueSource {
    pub fn new(spec: &ModuleSpec, world: SimHandle) -> Result<Self, ModuleError> {
        Ok(Self {
            world,
            output: single_output(spec)?,
        })
    }
}

impl Source for JobQueueSource {
    fn fetch(&mut self, now: SimTime) -> Result<Vec<Produced>, ModuleError> {
        let mut w = self.world.lock();
        w.check_outage("job_queue", now)
            .map_err(|e| ModuleError(e.to_string()))?;
        Ok(vec![Produced::new(&self.output, w.job_table())])
    }
}

/// Reports one provider's entry (param `provider`).
pub struct ProviderSource {
    world: SimHandle,
    provider: String,
    output: String,
}

impl ProviderSource {
    pub fn new(spec: &ModuleSpec, world: SimHandle) -> Result<Self, ModuleError> {
        let provider = spec.params.required_str("provider")?.to_string();
        if !world.lock().provider_names().contains(&provider) {
            return Err(ModuleError(format!(
                "scenario has no provider `{provider}`"
            )));
        }
        Ok(Self {
            world,
            provider,
            output: single_output(spec)?,
        })
    }
}

impl Source for ProviderSource {
    fn fetch(&mut self, now: SimTime) -> Result<Vec<Produced>, ModuleError> {
        let mut w = self.world.lock();
        w.check_outage(&format!("provider:{}", self.provider), now)
            .map_err(|e| ModuleError(e.to_string()))?;
        let entry = w
            .provider_entry(&self.provider, now)
            .map_err(|e| ModuleError(e.to_string()))?;
        Ok(vec![Produced::new(
            &self.output,
            Payload::Record(entry.to_record()),
        )])
    }
}

/// Reports the provisioning policy with the budget still unspent.
pub struct PolicySource {
    world: SimHandle,
    output: String,
}

impl PolicySource {
    pub fn new(spec: &ModuleSpec, world: SimHandle) -> Result<Self, ModuleError> {
        Ok(Self {
            world,
            output: single_output(spec)?,
        })
    }
}

impl Source for PolicySource {
    fn fetch(&mut self, now: SimTime) -> Result<Vec<Produced>, ModuleError> {
        let mut w = self.world.lock();
        w.check_outage("policy", now)
            .map_err(|e| ModuleError(e.to_string()))?;
        Ok(vec![Produced::new(
            &self.output,
            Payload::Record(w.policy().to_record()),
        )])
    }
}
