//! Task suites: latent graphs, sensory encoders, exploration data, the
//! shortest-path oracle, and train/eval/test task sets.

pub mod encoder;
pub mod graph;
pub mod oracle;
pub mod persist;
pub mod task;
pub mod walk;

pub use encoder::{make_state_encoder, Encoding, EncodingIndex, StateEncoder, ENCODING_DIM};
pub use graph::{
    build_gridworld_graph, full_tree, grid_node, sample_tree_graph, LatentGraph, NodeMeta, Suite,
};
pub use oracle::Oracle;
pub use task::{build_taskset, token_width, EnvConfig, Split, Task, TaskSet, TransitionTuple};
pub use walk::{exploration_walk, Step, WalkConfig};
