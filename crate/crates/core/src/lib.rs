pub mod checkpoint;
pub mod data;
pub mod experiment;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod prompting;
pub mod replay;
pub mod scalar;
pub mod tensor;

pub use scalar::Scalar;

/// Scalar the CLI trains and evaluates with.
pub type Float = f32;

/// Single-precision engine types.
pub type Model32 = model::Model<f32>;
pub type Learner32 = replay::Learner<f32>;
pub type Graph32 = tensor::Graph<f32>;
pub type Tensor32 = tensor::Tensor<f32>;

/// Double-precision variants, used for gradient checks.
pub type Model64 = model::Model<f64>;
pub type Learner64 = replay::Learner<f64>;
pub type Graph64 = tensor::Graph<f64>;
pub type Tensor64 = tensor::Tensor<f64>;
