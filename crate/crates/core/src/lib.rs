//! Desk-scale continual-learning engine for semantic segmentation.
//!
//! The crate trains a tiny per-pixel segmentation model over a sequence of
//! tasks (class-incremental or domain-incremental), keeps a fixed-capacity
//! replay buffer between tasks, and compares the sample-selection policies
//! that decide which samples enter and leave that buffer. Analysis tooling
//! covers confusion matrices, per-subset mIoU, task-recency bias, and
//! representation drift via linear CKA.
//!
//! Module map:
//! - [`types`]: shared domain types (images, label maps, samples, tasks).
//! - [`rng`]: seed-derived deterministic randomness with named substreams.
//! - [`dataset`]: on-disk dataset format (binary blobs + `index.json`).
//! - [`synthdata`]: procedural scenario generator (shapes on textured
//!   backgrounds, photometric domain shifts).
//! - [`model`]: 3-layer per-pixel classifier with exact analytic gradients.
//! - [`scoring`]: per-sample statistics the policies rank on.
//! - [`buffer`]: the replay memory with per-task quotas.
//! - [`policies`]: every selection strategy, plus the clustering helpers
//!   used by representation-based selection.
//! - [`metrics`]: evaluation (confusion, mIoU, recency bias, CKA).
//! - [`config`]: run configuration and the key-value config file format.
//! - [`harness`]: end-to-end drivers (`run`, `run-grid`, `analyze`).

pub mod buffer;
pub mod config;
pub mod dataset;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod policies;
pub mod rng;
pub mod scoring;
pub mod synthdata;
pub mod types;

pub use error::{Error, Result};
