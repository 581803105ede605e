//! Collaborative control-flow anomaly detection.
//!
//! Each agent models an application's control flow as a Markov chain over
//! memory regions ([`emm`]), raises alerts when recent transitions become
//! improbable ([`agent`]), and shares its model through a signed ledger
//! ([`chain`]) so that many devices converge on a common, filtered model.
//! [`simnet`] simulates that collaboration at scale, [`traces`] produces
//! synthetic workloads and attacks, and [`eval`] scores detectors.

pub mod agent;
pub mod chain;
pub mod cli;
pub mod emm;
pub mod error;
pub mod eval;
pub mod simnet;
pub mod traces;

pub use error::{Error, Result};
