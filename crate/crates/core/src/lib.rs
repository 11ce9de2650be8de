//! Four-direction selective-scan segmentation with a convolutional
//! state-space decoder, on a small reverse-mode autodiff engine.

pub mod checkpoint;
pub mod convssm;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kv;
pub mod loss;
pub mod mask;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod parallel;
pub mod prefix;
pub mod ssm;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
