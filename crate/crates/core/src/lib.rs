//! Goal-sampling-adaptation curriculum reinforcement learning for a planar
//! water-scooping task.
//!
//! The crate is organized bottom-up:
//!
//! * [`goaldist`]: goal distributions, their W2 interpolation, rewards.
//! * [`scoopenv`]: the deterministic scooping surrogate environment.
//! * [`tinynn`]: dense networks, squashed-Gaussian head, Adam, gradient checks.
//! * [`replay`]: episode replay buffer with hindsight relabeling.
//! * [`sac`]: soft actor-critic with twin critics and entropy tuning.
//! * [`trainer`]: curriculum schedule, variants, training and evaluation.
//! * [`cli`]: run configuration, checkpoints, metrics and plots.

pub mod error;
pub mod goaldist;
pub mod scoopenv;
pub mod replay;
pub mod sac;
pub mod tinynn;
pub mod trainer;
pub mod cli;

pub use error::{Error, Result};
