pub mod backbone;
pub mod cli;
pub mod data;
pub mod em;
pub mod eval;
pub mod error;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod plot;
pub mod presets;
pub mod pseudo;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use backbone::{Backbone, BackboneConfig, ForwardResult};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
