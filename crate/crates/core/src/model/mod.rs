//! The causal transformer policy.

pub mod cache;
pub mod checkpoint;
pub mod grad;
pub mod params;
pub mod sample;
pub mod scalar;
pub mod tokens;
pub mod transformer;

pub use cache::{query_forward, ContextCache, QueryOutput};
pub use checkpoint::{load_params, Checkpoint, OptimState};
pub use params::{ModelConfig, ModelParams, ParamLayout};
pub use sample::{greedy, select_action, softmax, Decoding};
pub use scalar::Scalar;
pub use tokens::{
    build_attention_mask, context_then_query, tokenize, AttentionMask, Role, Slot as SeqSlot,
    TokenSequence,
};
pub use transformer::{
    backward, cross_entropy, forward, forward_acts, forward_with, ActivationTrace, Activations,
    ForwardOutput, RowOverride,
};
pub use grad::{gradients, BatchResult, Example};
