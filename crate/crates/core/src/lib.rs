pub mod budget;
pub mod checkpoint;
pub mod codec;
pub mod datasets;
pub mod detector;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod geometry;
pub mod geoproto;
pub mod hashing;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod train;

pub use error::{Error, Result};

/// Training and inference precision.
pub type Tensor32 = numerics::Tensor<f32>;
pub type Graph32 = numerics::Graph<f32>;
pub type Model32 = model::Model<f32>;
/// Gradient-check precision.
pub type Tensor64 = numerics::Tensor<f64>;
pub type Graph64 = numerics::Graph<f64>;
pub type Model64 = model::Model<f64>;
/// Exact arithmetic for the link budget.
pub type Rational = budget::Exact;
