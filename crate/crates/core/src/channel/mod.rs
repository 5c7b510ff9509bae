//! Decision channel framework: the module protocol, contract validation,
//! the per-cycle driver and the scheduler.

mod cycle;
mod module;
mod schedule;
mod validate;

pub use cycle::{
    Channel, ChannelError, ChannelModules, ChannelState, ChannelStatus, Clock, ConsumedProduct,
    CycleOutcome, CycleReport, PublishStatus, PublisherReport, WrittenProduct,
};
pub use module::{
    ModuleError, ModuleInstance, ModuleKind, ModuleSpec, ParamLeaf, ParamScalar, ParamValue,
    Params, Produced, PublishContext, Publisher, Source, Transform,
};
pub use schedule::{schedule, CycleObserver, ReportLog};
pub use validate::{
    transform_cycles, transform_order, validate_channel, ChannelSpec, Contract, CycleDetected,
    Violation, DEFAULT_SOURCE_RETRY_CAP,
};
