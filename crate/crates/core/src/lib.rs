pub mod data;
pub mod diagnostics;
pub mod ensemble;
pub mod error;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Graph, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type Model32 = models::Model<f32>;
pub type Model64 = models::Model<f64>;
pub type Trainer32 = training::Trainer<f32>;
pub type Trainer64 = training::Trainer<f64>;
