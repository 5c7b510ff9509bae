//! Simulated facilities: a job queue, priced providers and a provisioner
//! sink, all driven by a scenario file and a seed.

mod modules;
pub mod scenario;
mod world;

pub use modules::{JobQueueSource, PolicySource, ProviderSource};
pub use scenario::{
    JobBatch, JobSpec, Outage, PolicySpec, PriceProcess, ProviderSpec, Scenario, ScenarioError,
    Window,
};
pub use world::{jitter_draw, JobCounts, LedgerEntry, SimError, SimHandle, SimSink, SimWorld};
