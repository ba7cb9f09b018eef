//! Early-exit mistake detection on streaming procedural videos.
//!
//! A frozen detector watches clip features arrive at a fixed frame rate,
//! anticipates unseen future frames, and scores whether the performer is
//! making a mistake. A recurrent exit policy, trained with PPO against a
//! dense improvement reward, a sparse terminal reward, and a per-step
//! observation penalty, decides at every frame whether to keep watching or
//! commit to a verdict. The crate also ships threshold, supervised, and
//! reinforcement-learning baselines plus an evaluation harness that reports
//! average precision against the fraction of video observed.
//!
//! Modules:
//! - [`numerics`]: tensors, autodiff tape, layers, optimizers, checkpoints.
//! - [`env`]: clip records, the synthetic clip generator, episode stepping.
//! - [`detector`]: the future-anticipating mistake detector.
//! - [`policy`]: the recurrent exit policy network and episode rollouts.
//! - [`training`]: rewards, generalized advantage estimation, PPO.
//! - [`baselines`]: random, confidence/entropy-threshold, supervised, and
//!   RL exit strategies.
//! - [`eval`]: average precision, observation ratio, frontier/attention
//!   exports.
//! - [`config`] and [`runner`]: run configuration, presets, manifests, and
//!   the command implementations behind the `exitlab` binary.

pub mod baselines;
pub mod config;
pub mod detector;
pub mod env;
pub mod policy;
pub mod error;
pub mod eval;
pub mod numerics;
pub mod rng;
pub mod runner;
pub mod training;
pub mod workers;

pub use error::{Error, Result};
