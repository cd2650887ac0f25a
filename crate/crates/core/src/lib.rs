//! Parallel SMC² for state-space models.
//!
//! An outer sequential Monte Carlo sampler over static parameters, each of
//! which is scored by an inner bootstrap particle filter. Samples are spread
//! over a group of SPMD ranks that exchange messages through [`comms`];
//! resampling uses a fully distributed redistribution with `O(log P)` rounds
//! ([`resample`]). A particle-marginal Metropolis-Hastings sampler
//! ([`pmcmc`]) serves as the baseline.

pub mod cli;
pub mod comms;
pub mod error;
pub mod numerics;
pub mod pf;
pub mod pmcmc;
pub mod resample;
pub mod rng;
pub mod smc2;
pub mod ssm;
pub mod validate;
pub mod wire;

pub use error::{Error, Result};
