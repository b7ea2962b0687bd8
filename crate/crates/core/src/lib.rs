pub mod ablation;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub(crate) mod binio;
pub mod curves;
pub mod data;
pub mod error;
pub(crate) mod kernels;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod registry;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use kernels::{argmax_channels, softmax_channels};
pub use tensor::{Grid, LabelMap, PixelMask, Tensor};
