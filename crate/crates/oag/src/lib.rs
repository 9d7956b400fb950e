//! Online alternate generator: a portable preprocessing defense against
//! gray-box adversarial attacks, together with the attacks, a trainable
//! target classifier, and an evaluation harness at desk scale.
//!
//! The defense synthesizes a substitute image from scratch for every input:
//! a small randomly-initialized energy network is trained online while the
//! image is sampled via Langevin dynamics, alternating T_I image updates with
//! one network update for T_N rounds. The substitute keeps the input's
//! semantics but not its adversarial noise.

pub mod attacks;
pub mod autoencoder;
pub mod classifier;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod generator;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
