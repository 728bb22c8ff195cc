//! A small dense-tensor network engine: valid-mode 3D convolutions with
//! exact backpropagation, mean squared error, He initialisation, Adam, and
//! the shallow fully convolutional landmark model.
//!
//! Everything is generic over [`Real`] so the gradient checks can run the
//! very same code in `f64` that training runs in `f32`.

mod adam;
mod conv;
mod model;
mod real;
mod tensor;
mod train;
mod weights_io;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use conv::{conv3d_valid_backward, conv3d_valid_forward, Activation, ConvLayer, LayerGrads};
pub use model::{he_init, FcnModel, Gradients, MARGIN};
pub use real::Real;
pub use tensor::{Batch, Tensor4};
pub use train::{
    evaluate_loss, masked_mse_loss, mse_loss, train_model, BestSnapshot, EpochStats, Patch, PatchSource,
    Schedule, TrainReport,
};
pub use weights_io::{load_weights, read_weights, save_weights, write_weights};
