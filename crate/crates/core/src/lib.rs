//! Optimal data allocation for MAML on mixed linear regression.
//!
//! The crate is organised bottom-up:
//!
//! * [`rng`] samples the generative model and evaluates Gaussian matrix moments,
//! * [`maml`] solves one-step MAML meta-training in closed form and measures test loss,
//! * [`theory`] evaluates the analytic average test loss,
//! * [`allocator`] finds optimal allocations (cubic root, grids, non-uniform search),
//! * [`harness`] runs budget sweeps and the bootstrap optimum estimate,
//! * [`config`] and [`cli`] provide the command-line front end.

pub mod allocator;
pub mod cli;
pub mod config;
pub mod error;
pub mod harness;
pub mod maml;
pub mod numeric;
pub mod rng;
pub mod theory;

pub use error::{Error, Result};
