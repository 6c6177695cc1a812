//! Discrete-event simulator for autoscaling prefill/decode-disaggregated LLM
//! serving.
//!
//! Virtual time is integral milliseconds. All randomness flows from one
//! seed, so a run is a pure function of its configuration and trace.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bucket;
pub mod cluster;
pub mod config;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod router;
pub mod scaler;
pub mod sim;
pub mod trace;
pub mod velocity;

pub use bucket::{BucketId, BucketSpec, BucketTable, LengthClass};
pub use config::ExperimentConfig;
pub use engine::{Millis, RngStreams, Stream};
pub use error::{ConfigError, Error};
pub use metrics::{Attainment, SimReport, Summary};
pub use router::{FeasibilityMode, SloPolicy};
pub use scaler::{PolicyKind, ScalerSettings, ScalingDecision, StagePolicy};
pub use sim::{SimConfig, Simulation};
pub use trace::TraceRecord;
pub use velocity::VelocityProfile;
