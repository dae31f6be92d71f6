//! Neuron pruning by layer decomposition and recomposition.
//!
//! Each linear layer is factored by SVD into a k×k embedding convolution and a
//! 1×1 transformation. Neurons are then pruned layer by layer while the lost
//! information is compensated in the embedding space of the next layer, and
//! finally adjacent factors are multiplied back into single slim layers. A
//! conventional select-and-least-squares pruner is included for comparison.

pub mod bench;
pub mod data;
pub mod decompose;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod net;
pub mod pruner;
pub mod recompose;
pub mod reconstruct;

pub use error::{Error, Result};
pub use linalg::Matrix;
pub use net::{Network, Tensor4};
