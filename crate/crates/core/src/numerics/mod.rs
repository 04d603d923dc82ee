//! Minimal dense-tensor engine: a fixed layer vocabulary with hand-derived
//! reverse-mode gradients, He/Glorot initializers, inverted dropout, and Adam.

mod adam;
mod net;
mod tensor;

pub use adam::AdamState;
pub use net::{
    backward, forward, init_params, loss_and_grad, loss_grad, loss_value, validate_specs,
    ForwardTrace, LayerSpec, Loss, ModelParams, DEFAULT_DROPOUT_RATE,
};
pub use tensor::{euclidean_distance, squared_distance, Tensor};
