//! Dense tensors, reverse-mode differentiation and transformer blocks.

pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_sampled, probe_loss, random_tensor, GradCheckReport};
pub use layers::{
    positional_encoding, DecoderBlock, EncoderBlock, FeedForward, LayerNorm, Linear,
    MultiHeadAttention,
};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{sigmoid, Gradients, NodeId, Tape};
pub use tensor::{softmax_slice, Scalar, Tensor};
