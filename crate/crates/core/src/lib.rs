pub mod autograd;
pub mod block;
pub mod conv;
pub mod config;
pub mod cost;
pub mod error;
pub mod init;
pub mod layer;
pub mod net;
pub mod params;
pub mod report;
pub mod rf;
pub mod scalar;
pub mod synthetic;
pub mod te;
pub mod tables;
pub mod tensor;
pub mod train;
pub mod tsconv;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor5F32 = tensor::Tensor5<f32>;
pub type Tensor5F64 = tensor::Tensor5<f64>;
pub type NetworkF32 = net::Network<f32>;
pub type NetworkF64 = net::Network<f64>;
pub type ParamStoreF64 = params::ParamStore<f64>;
