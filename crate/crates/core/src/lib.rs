//! Safe reinforcement learning with generative-model-based soft barrier
//! functions.
//!
//! The crate learns three things jointly against an unknown stochastic plant:
//! a neural SDE surrogate of the plant ([`sdegen`]), a sigmoid-output barrier
//! network whose supermartingale conditions bound the probability of ever
//! entering the unsafe set ([`barrier`]), and a deterministic policy trained
//! by pathwise gradients through the surrogate ([`policyopt`]). The
//! [`orchestrator`] runs the outer loop, persists checkpoints and produces
//! the practical safety lower bound.

pub mod barrier;
pub mod diffcore;
pub mod envs;
mod error;
pub mod nn;
pub mod orchestrator;
pub mod policyopt;
pub mod rng;
pub mod sdegen;
pub mod testing;

pub use error::{Error, Result};
