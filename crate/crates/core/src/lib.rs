//! Dynamics-aligned flow matching policies on deterministic 2D manipulation toys.
//!
//! A flow-matching dynamics model `f(o_{t+1} | o_t, a_t)` and a flow-matching
//! policy `π(a_t | o_t, o_{t+1})` are sampled jointly: at every flow step each
//! model is conditioned on the other's one-shot extrapolated sample.

pub mod cli;
mod codec;
pub mod data;
pub mod envs;
pub mod error;
pub mod eval;
pub mod flowcore;
pub mod nets;
pub mod numerics;
pub mod sampler;
pub mod training;

pub use error::{Error, Result};
