//! Tensors, layers and reverse-mode gradients shared by every model component.

mod graph;
pub mod gradcheck;
pub mod layers;
mod ops;
pub mod params;
pub mod tensor;

pub use graph::{Graph, Var};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use layers::{
    sinusoidal_positions, AttentionConfig, Embedding, FeedForward, LayerNorm, Linear,
    MultiHeadAttention,
};
pub use ops::{log_sum_exp, softmax_in_place, AttentionOutput};
pub use params::{Grads, ParamId, ParamStore};
pub use tensor::{Real, Tensor};
