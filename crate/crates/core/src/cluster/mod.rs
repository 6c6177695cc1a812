//! Instances, requests, and the performance model they run on.
//!
//! The event-driven mechanics that move requests between instances live in
//! [`crate::sim`]; this module owns the state each instance carries and the
//! timing formulas.

mod instance;
mod perf;
mod request;

pub use instance::{Instance, InstanceId, InstanceState, Iteration, Role};
pub use perf::{ConvertibleConfig, PerfModel, DEFAULT_PREFILL_SEQ_EQUIV};
pub use request::{Phase, Placement, Request, RequestId};

pub(crate) use perf::ceil_ms;
#[cfg(test)]
pub(crate) use perf::test_perf;
