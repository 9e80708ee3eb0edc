pub mod blocks;
pub mod config;
pub mod ctc;
pub mod data;
pub mod decoding;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type LvCtc64 = model::LvCtc<f64>;
pub type LvCtc32 = model::LvCtc<f32>;
pub type VanillaCtc64 = model::VanillaCtc<f64>;
pub type Trainer64 = train::Trainer<f64>;
pub type Trainer32 = train::Trainer<f32>;
