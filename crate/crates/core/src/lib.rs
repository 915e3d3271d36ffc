//! Desk-scale mixture-of-experts laboratory.
//!
//! The crate trains small MoE classifiers with Top-k routing, elastic
//! co-activation sampling (random expert subsets drawn from a dynamically
//! sized candidate pool), Top-p and null-expert baselines, and measures how
//! each model behaves when more experts are activated at inference than
//! during training.

pub mod baselines;
pub mod diagnostics;
pub mod elastic;
mod error;
pub mod exec;
pub mod harness;
pub mod losses;
pub mod moe;
pub mod numcore;
pub mod tasks;

pub use error::{Error, Result};
pub use exec::Exec;
