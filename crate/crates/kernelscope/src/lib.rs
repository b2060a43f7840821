//! kernelscope learns, from trajectory observations of interacting-agent ODE
//! systems, both the low-dimensional variables a pair-interaction kernel
//! depends on and the kernel itself, and validates the learned pair with
//! kernel-error and trajectory-prediction metrics.

pub mod benchmarks;
pub mod dynamics;
pub mod error;
pub mod features;
pub mod io;
pub mod linalg;
pub mod mpls;
pub mod metrics;
pub mod regression;
pub mod rng;
pub mod runner;

pub use error::{Error, Result};
