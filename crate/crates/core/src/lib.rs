//! Proximal policy optimization with replaceable value and policy heads.
//!
//! Either head can be a conventional tanh MLP or a clamped Deep Boltzmann
//! Machine whose output is a (sampled) free energy. The crate also ships a
//! small cyber-defense environment and an experiment harness that trains and
//! compares the four head combinations.

pub mod cyber_env;
pub mod energy_model;
mod error;
pub mod free_energy;
pub mod harness;
pub mod ppo;
pub mod sampler;

pub use error::{Error, Result};
