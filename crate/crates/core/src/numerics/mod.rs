//! Dense tensors, channel statistics, similarity and softmax kernels, and a
//! finite-difference gradient checker.
//!
//! Every loss in the crate is built from these kernels and carries a
//! closed-form backward pass; [`grad_check`] validates those passes.

mod gradcheck;
mod kernels;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use kernels::{
    channel_stats, cosine_similarity, cosine_similarity_grad, dot, l2_norm, log_softmax, pooled_channel_stats,
    softmax_cross_entropy, softmax_cross_entropy_grad, ChannelStats,
};
pub use tensor::Tensor;
