//! Semi-supervised medical-style segmentation with bidirectional copy-paste
//! between labeled and unlabeled images, trained by a mean teacher.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`). Training
//! and gradient checks use `f64`; the aliases below name the common choices.

pub mod datakit;
pub mod evalkit;
pub mod error;
pub mod label;
pub mod loss;
pub mod maskgen;
pub mod mixer;
pub mod pseudolabel;
pub mod scalar;
pub mod segnet;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use label::LabelMap;
pub use maskgen::Mask;
pub use scalar::Scalar;
pub use segnet::{ModelParams, NetConfig};
pub use tensor::{Eager, Graph, Tape, Tensor, Var};

/// Working precision of the trainer and the CLI.
pub type Real = f64;
pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tape64 = Tape<f64>;
pub type ModelParams64 = ModelParams<f64>;
