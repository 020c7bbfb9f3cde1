//! Deterministic simulator and protocol library for moving layers between
//! pipeline stages of a running LLM server.
//!
//! The crate is organised bottom-up:
//!
//! - [`cluster`]: GPUs, model, pipeline configurations and config diffs.
//! - [`kv`]: layer-stacked block KV cache with compaction and resizing.
//! - [`fabric`]: inter-GPU transport with per-device locks and the
//!   two-phase migration handshake.
//! - [`migrator`]: dirty-bitmap KV patching and convergence counters.
//! - [`weights`]: asynchronous low-priority weight staging.
//! - [`coordinator`]: feasibility, plans and the five-phase reconfiguration.
//! - [`engine`]: the discrete-event serving simulation, workloads and metrics.

pub mod cluster;
pub mod coordinator;
pub mod engine;
pub mod fabric;
pub mod kv;
pub mod migrator;
pub mod queue;
pub mod units;
pub mod weights;

pub use cluster::{GpuId, GpuSpec, ModelSpec, PpConfig, Stage};
pub use units::SimTime;
