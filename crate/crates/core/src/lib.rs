//! Monte Carlo engine for the extremes of branching Brownian motion.
//!
//! The crate simulates BBM populations, samples the Bessel-3 minimisation
//! law `zeta`, builds cluster samples through a spine decomposition
//! (Poisson timestamps, a Bessel backbone and conditioned decorations),
//! assembles the limiting extremal process, and checks everything against
//! closed-form oracles.

// Range checks are written `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bbm;
pub mod bessel;
pub mod cluster;
pub mod error;
pub mod limit;
pub mod rng;
pub mod runner;
pub mod stats;
pub mod types;
pub mod validators;

pub use error::{Error, Result};
pub use rng::{CounterRng, StreamKey};
