//! Counterfactual-harm constrained policy optimization over structural
//! causal model environments.
//!
//! The crate is `no_std` (with `alloc`): environments, networks, estimators,
//! the trainer, evaluation and shields are pure numeric code. File formats
//! and the command line live in the companion `cfharm` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod counterfactual;
pub mod env;
pub mod error;
pub mod estimators;
pub mod eval;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod scm;
pub mod shield;
pub mod trainer;

pub use error::{Error, Result};
