//! Minimal CNN representation: layers, forward pass, backpropagation,
//! batch-norm folding and the model file format.

mod fold;
mod forward;
mod io;
mod layer;
mod network;
pub(crate) mod ops;
mod tensor;
pub mod train;

pub use fold::fold_batchnorm;
pub use forward::{forward, predict, softmax_rows, ActivationTrace};
pub use io::{load_model, model_from_bytes, model_to_bytes, save_model, MODEL_MAGIC, MODEL_VERSION};
pub use layer::{BatchNorm, Conv, Layer, LayerKind, LayerOp};
pub use network::{Form, Network};
pub use ops::im2col;
pub use tensor::Tensor4;

pub(crate) use forward::{apply_layer, conv_forward, run_range_chunked};
pub(crate) use tensor::FeatureMap;
