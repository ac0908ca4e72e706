//! Minimal tensor and layer toolkit with manual backpropagation.

pub mod checkpoint;
pub mod conv;
pub mod dense;
pub mod gradcheck;
pub mod optim;
pub mod tensor;

pub use checkpoint::{Checkpoint, StoredTensor};
pub use conv::{conv_out_size, Conv2d};
pub use dense::{fan_in_uniform, Dense};
pub use gradcheck::{check_gradients, GradCheck};
pub use optim::{Adam, AdamConfig};
pub use tensor::{
    clip_grad_norm, count_params, grad_norm, matmul, relu_backward, relu_inplace, sigmoid,
    top_k_indices, zero_grads, Param, Parameters, Real, Tensor,
};
