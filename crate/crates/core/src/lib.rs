//! Meta reinforcement learning with evolution strategies.
//!
//! A diagonal Gaussian over actor and critic network parameters is trained
//! by natural evolution strategies. Every sampled worker adapts to its task
//! with deterministic-policy-gradient updates before being scored, so the
//! distribution learns a starting point (and an exploration width) that
//! adapts well rather than one that merely performs well.
//!
//! Modules, bottom up:
//! - [`nn`]: flat-parameter MLPs with hand-written backprop
//! - [`dist`]: Gaussian meta-distributions, seeded sampling, search gradients
//! - [`env`]: point-mass task families
//! - [`ddpg`]: replay buffer and the adaptation inner loop
//! - [`meta`]: the outer loop
//! - [`experiment`]: config files, checkpoints, metrics and evaluation

pub mod ddpg;
pub mod dist;
pub mod env;
pub mod error;
pub mod experiment;
pub mod meta;
pub mod nn;
pub mod rng;

pub use error::{CheckpointError, Error, Result};
