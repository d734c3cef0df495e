//! Dense and competitive fully convolutional segmentation networks on a small
//! CPU tensor kernel with hand-written backward passes.
//!
//! The competitive variants replace channel concatenation in skip connections
//! with maxout (elementwise maximum across feature maps): inside dense blocks
//! ([`blocks::DenseBlock`] in competitive mode) and where encoder skips meet
//! the decoder ([`blocks::UnpoolBlock`]). [`network::Model`] assembles the four
//! combinations of the two.

pub mod augment;
pub mod blocks;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod params;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use params::{Param, ParamKind, ParamStore};
pub use rng::Rng;
pub use tensor::{ArgIndex, LabelMap, Scalar, Tensor};
