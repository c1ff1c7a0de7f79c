//! In-context reinforcement learning toolkit.
//!
//! Procedural gridworld and tree-maze task suites, a small causal transformer
//! trained to imitate oracle actions from in-context transition memories,
//! Q-learning comparators, closed-loop evaluation, and the representation and
//! mechanism analyses (kernel alignment, linear probes, integrated gradients,
//! attention interventions) used to interpret what the trained model does.

pub mod attrib;
pub mod baselines;
pub mod envcore;
pub mod error;
pub mod eval;
pub mod model;
pub mod probe;
pub mod rng;
pub mod stats;
pub mod store;
pub mod train;

pub use error::{Error, Result};
