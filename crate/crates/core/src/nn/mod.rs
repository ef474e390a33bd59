//! MLP-BN networks: `Input → [Linear → BatchNorm → ReLU] × L → Linear → Softmax`.
//!
//! Gradients are derived by hand for this fixed family. Both parameter and
//! input gradients are available; the latter drive input synthesis.

mod backprop;
mod model;
mod optim;

pub use backprop::{
    bn_match_loss, bn_match_loss_and_grads, bn_match_loss_and_input_grad, softmax_rows, BatchStats, ForwardOutput, Mode,
};
pub use model::{BatchNormLayer, Layer, LinearLayer, ModelParams, BN_EPS, BN_MOMENTUM};
pub use optim::{sgd_step, GradientSet, TrainConfig};
