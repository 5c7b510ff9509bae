use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::channel::{ModuleError, ModuleInstance, ModuleKind, ModuleSpec, Produced, Transform};
use crate::datablock::DataBlockSnapshot;
use crate::provisioning::{
    EligibilityTransform, FomRankingTransform, ProvisionerPublisher, RequestGenerationTransform,
};
use crate::sim::{JobQueueSource, PolicySource, ProviderSource, SimHandle};

/// Builds a module from its spec. The second argument is the channel id.
pub type Factory =
    Box<dyn Fn(&ModuleSpec, &str) -> Result<ModuleInstance, ModuleError> + Send + Sync>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("implementation `{0}` is already registered")]
    Duplicate(String),
}

/// Implementation key to module factory.
#[derive(Default)]
pub struct ModuleRegistry {
    entries: BTreeMap<String, (ModuleKind, Factory)>,
}

impl fmt::Debug for ModuleRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_map()
            .entries(self.entries.iter().map(|(k, (kind, _))| (k, kind)))
            .finish()
    }
}

impl ModuleRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        key: &str,
        kind: ModuleKind,
        factory: Factory,
    ) -> Result<(), RegistryError> {
        if self.entries.contains_key(key) {
            return Err(RegistryError::Duplicate(key.to_string()));
        }
        self.entries.insert(key.to_string(), (kind, factory));
        Ok(())
    }

    pub fn kind_of(&self, key: &str) -> Option<ModuleKind> {
        self.entries.get(key).map(|(k, _)| *k)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Runs the factory for `spec.implementation`. Returns `None` when the
    /// key is unknown.
    pub fn build(
        &self,
        spec: &ModuleSpec,
        channel_id: &str,
    ) -> Option<Result<ModuleInstance, ModuleError>> {
        let (kind, factory) = self.entries.get(&spec.implementation)?;
        Some(factory(spec, channel_id).and_then(|m| {
            if m.kind() == *kind {
                Ok(m)
            } else {
                Err(ModuleError(format!(
                    "factory for `{}` built a {} but is registered as {kind}",
                    spec.implementation,
                    m.kind()
                )))
            }
        }))
    }

    /// Pass-through plus the provisioning transforms.
    pub fn builtin() -> Self {
        let mut r = Self::new();
        let t = ModuleKind::Transform;
        r.register(
            "passthrough",
            t,
            Box::new(|s, _| {
                Ok(ModuleInstance::Transform(Box::new(
                    PassthroughTransform::new(s)?,
                )))
            }),
        )
        .expect("fresh registry");
        r.register(
            "eligibility",
            t,
            Box::new(|s, _| {
                Ok(ModuleInstance::Transform(Box::new(
                    EligibilityTransform::new(s)?,
                )))
            }),
        )
        .expect("fresh registry");
        r.register(
            "fom_ranking",
            t,
            Box::new(|s, _| {
                Ok(ModuleInstance::Transform(Box::new(
                    FomRankingTransform::new(s)?,
                )))
            }),
        )
        .expect("fresh registry");
        r.register(
            "request_generation",
            t,
            Box::new(|s, _| {
                Ok(ModuleInstance::Transform(Box::new(
                    RequestGenerationTransform::new(s)?,
                )))
            }),
        )
        .expect("fresh registry");
        r
    }

    /// Built-ins plus the simulated facilities bound to `world`.
    pub fn with_simulation(world: &SimHandle) -> Self {
        let mut r = Self::builtin();
        let w = world.clone();
        r.register(
            "sim_job_queue",
            ModuleKind::Source,
            Box::new(move |s, _| {
                Ok(ModuleInstance::Source(Box::new(JobQueueSource::new(
                    s,
                    w.clone(),
                )?)))
            }),
        )
        .expect("fresh key");
        let w = world.clone();
        r.register(
            "sim_provider",
            ModuleKind::Source,
            Box::new(move |s, _| {
                Ok(ModuleInstance::Source(Box::new(ProviderSource::new(
                    s,
                    w.clone(),
                )?)))
            }),
        )
        .expect("fresh key");
        let w = world.clone();
        r.register(
            "sim_policy",
            ModuleKind::Source,
            Box::new(move |s, _| {
                Ok(ModuleInstance::Source(Box::new(PolicySource::new(
                    s,
                    w.clone(),
                )?)))
            }),
        )
        .expect("fresh key");
        let w = world.clone();
        r.register(
            "sim_provisioner",
            ModuleKind::Publisher,
            Box::new(move |s, ch| {
                Ok(ModuleInstance::Publisher(Box::new(
                    ProvisionerPublisher::new(s, Box::new(w.sink(ch)))?,
                )))
            }),
        )
        .expect("fresh key");
        r
    }
}

/// Copies the i-th consumed product to the i-th produced name.
pub struct PassthroughTransform {
    pairs: Vec<(String, String)>,
}

impl PassthroughTransform {
    pub fn new(spec: &ModuleSpec) -> Result<Self, ModuleError> {
        if spec.consumes.len() != spec.produces.len() {
            return Err(ModuleError(format!(
                "passthrough `{}` needs as many produces as consumes",
                spec.name
            )));
        }
        Ok(Self {
            pairs: spec
                .consumes
                .iter()
                .cloned()
                .zip(spec.produces.iter().cloned())
                .collect(),
        })
    }
}

impl Transform for PassthroughTransform {
    fn transform(&mut self, inputs: &DataBlockSnapshot) -> Result<Vec<Produced>, ModuleError> {
        self.pairs
            .iter()
            .map(|(from, to)| {
                inputs
                    .payload(from)
                    .map(|p| Produced::new(to, p.clone()))
                    .ok_or_else(|| ModuleError(format!("input `{from}` not available")))
            })
            .collect()
    }
}
