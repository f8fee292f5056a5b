pub mod autograd;
pub mod batching;
pub mod config;
pub mod cosegment;
pub mod dataset;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type TrainState32 = training::TrainState<f32>;
pub type SaliencyMap32 = dataset::SaliencyMap<f32>;
