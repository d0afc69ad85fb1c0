//! Layered feed-forward networks with reverse-mode gradients.
//!
//! Besides parameter gradients, every backward pass returns a
//! [`LayerCapture`] per parameterized layer: the homogeneous inputs `h̄` and
//! per-sample pre-activation gradients `s` the curvature engine consumes.

mod gradcheck;
mod layer;
mod loss;
mod model;

pub use gradcheck::{central_difference, finite_diff_grad, max_relative_error};
pub use layer::{
    Activation, BatchNorm, CaptureKind, Conv2d, Dense, Layer, LayerCapture, LayerNorm, MaxPool, Mode,
};
pub use loss::{cross_entropy, mse, softmax, Loss, Targets};
pub use model::{argmax_rows, Backward, LayerSpec, Model, ParamRole, ParamSlot, StepOutput};
