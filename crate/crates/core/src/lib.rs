//! Continual learning of a world model (frame autoencoder plus recurrent
//! mixture-density predictor) and an actor-critic controller, with
//! pseudo-rehearsal: rollouts dreamed by frozen copies of the networks are
//! interleaved with live data so earlier tasks are not forgotten.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod config;
pub mod continual;
pub mod controller;
pub mod envs;
pub mod error;
pub mod metrics;
pub mod numerics;
pub mod rng;
pub mod rollouts;
pub mod vae;
pub mod world_model;

pub use error::{Error, Result};
