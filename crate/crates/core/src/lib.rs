//! Deterministic desk-scale simulator for model-heterogeneous federated
//! learning.
//!
//! The crate is organised bottom-up:
//!
//! - [`nn`]: a small exact-gradient engine and the block-structured model
//!   family every strategy trains.
//! - [`hetero`]: width/depth sub-model extraction and the index maps used for
//!   overlap-aware partial aggregation.
//! - [`algorithms`]: the federated strategies over a shared round protocol.
//! - [`resource`]: device profiles, the analytic cost model, the model pool and
//!   constraint-driven model assignment.
//! - [`data`]: synthetic datasets, CSV I/O and IID/Dirichlet partitioning.
//! - [`metrics`]: accuracy, time-to-accuracy, stability, effectiveness and the
//!   simulated clock.
//! - [`config`], [`runner`], [`report`]: experiment configuration,
//!   orchestration and summaries used by the `hetfed` binary.

pub mod algorithms;
pub mod config;
pub mod data;
pub mod error;
pub mod hetero;
pub mod metrics;
pub mod nn;
pub mod report;
pub mod resource;
pub mod rng;
pub mod runner;

pub use error::{Error, Result};
