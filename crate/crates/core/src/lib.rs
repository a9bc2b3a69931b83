//! Trace-driven simulator for semantic-boundary KV-cache retrieval.
//!
//! The engine consumes recorded (or synthetic) query/key/value traces and
//! replays decoding under a retrieval policy: prompt keys are grouped into
//! k-means clusters, generated keys into temporal segments, both offloaded
//! to a simulated host pool, and a budgeted subset is fetched back whenever
//! the query stream crosses a semantic boundary. Every step is checked
//! against exact full attention.

pub mod cluster;
pub mod config;
pub mod engine;
pub mod error;
pub mod footprint;
pub mod metrics;
pub mod numeric;
pub mod pool;
pub mod report;
pub mod rng;
pub mod segmenter;
pub mod select;
pub mod trace;

pub use cluster::{CacheUnit, UnitKind};
pub use config::{BoundaryMode, Management, Policy, PolicyConfig};
pub use engine::{compare_policies, run_episode, run_prefill, EngineState};
pub use error::{Error, Result};
pub use numeric::{Geometry, Real};
pub use report::{ComparisonReport, EpisodeReport, PolicyRow, StepMetrics};
pub use trace::{SyntheticSpec, Trace};
