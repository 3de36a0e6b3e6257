//! Federated nested learning at desk scale.
//!
//! Three nested optimization loops:
//!
//! * per token, a delta-rule associative memory ([`memory`]) adapts to the
//!   context at inference time;
//! * per batch, clients learn the rule parameters (low-rank adapters, memory
//!   gate, write strength) by backpropagating through the memory trajectory
//!   ([`model`], [`trainer`]);
//! * per round, a server averages the rule parameters ([`federation`]).
//!
//! [`data`] builds the synthetic multi-needle retrieval federation and
//! streaming tasks, [`eval`] computes metrics, and [`experiment`] wires it
//! all into reproducible runs.

pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod federation;
pub mod memory;
pub mod model;
pub mod numerics;
pub mod records;
pub mod trainer;

pub use error::{Error, Result};
