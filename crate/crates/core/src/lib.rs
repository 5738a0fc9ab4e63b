//! Expert-parallel Mixture-of-Experts inference on a small simulated
//! cluster, with a weight-residency simulator and a closed-form performance
//! model.

pub mod config;
pub mod error;
pub mod model;
pub mod numerics;
pub mod perfmodel;
pub mod placement;
pub mod runtime;
pub mod wiring;

pub use config::{Mode, RunConfig, TransportKind};
pub use error::{Error, Result};
