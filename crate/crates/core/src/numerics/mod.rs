//! Dense-tensor arithmetic, feed-forward layers, reverse-mode gradients,
//! and a plain SGD step. Everything else in the crate computes on this.

mod layer;
mod optim;
mod tensor;

pub use layer::{Activation, Init, LayerGrads, LinearLayer, Mlp, MlpCache, MlpGrads};
pub use optim::{sgd_step, sgd_step_tensor};
pub use tensor::{cross_entropy, cross_entropy_grad, logsumexp, matvec, softmax, Tensor};
