//! Multi-task fitted Q-iteration on synthetic low-rank episodic MDP
//! ensembles: instance generation, offline data, the learner, bound
//! calculators and a reproducible experiment harness.

pub mod analysis;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod features;
pub mod fqi;
pub mod harness;
mod json;
pub mod linalg;
pub mod mdp;
pub mod rng;

pub use error::{Error, Result};
