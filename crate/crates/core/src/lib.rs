//! Deterministic fault-injection simulator and evaluation harness for
//! tool-calling agents.
//!
//! The crate is organized bottom-up:
//!
//! - [`taxonomy`]: error classes, the failure catalog and error signatures.
//! - [`bank`]: recovery exemplars and signature-similarity retrieval.
//! - [`sim`]: the episode simulator with its simulated clock.
//! - [`agents`]: policies that drive episodes.
//! - [`benchgen`]: seeded evaluation suites.
//! - [`metrics`]: grading, aggregation and bootstrap statistics.
//! - [`pipeline`]: trace repair and corpus composition.
//! - [`harness`]: parallel suite execution.

pub mod agents;
pub mod bank;
pub mod benchgen;
pub mod chat;
pub mod harness;
pub mod metrics;
pub mod pipeline;
pub mod seed;
pub mod sim;
pub mod taxonomy;
