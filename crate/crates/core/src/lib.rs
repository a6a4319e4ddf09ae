//! Design-space exploration for chiplet-based LLM inference systems.
//!
//! Phase 1 sweeps chiplet and server hardware ([`silicon`], [`server`]);
//! phase 2 maps a model onto each candidate ([`mapping`]), simulates it
//! ([`perfsim`]) and ranks the results by TCO per generated token
//! ([`economics`]). [`explore`] wires the two phases together.

pub mod config;
pub mod economics;
pub mod error;
pub mod explore;
pub mod mapping;
pub mod perfsim;
pub mod money;
pub mod output;
pub mod server;
pub mod silicon;
pub mod sparsity;
pub mod sweep;
pub mod workload;

pub use error::{Error, Result};
