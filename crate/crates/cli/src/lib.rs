//! Experiment pipeline and acceptance checks behind the `icrl` binary.

pub mod config;
pub mod accept;
pub mod pipeline;
