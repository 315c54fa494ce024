//! Mango detection and grading: a Haar cascade finds fruit, residual CNNs
//! grade ripeness and, for spoiled fruit, disease.
//!
//! Everything numeric is generic over [`scalar::Scalar`] (`f32` or `f64`).
//! The aliases below fix the production choice, `f32`.

pub mod cascade;
pub mod dataset;
pub mod eval;
pub mod imaging;
pub mod nn;
pub mod pipeline;
pub mod scalar;
pub mod synthetic;

pub use cascade::{CascadeModel, Detection, ScanParams};
pub use imaging::BBox;
pub use nn::{ArchitectureSpec, Prediction, TrainConfig};
pub use pipeline::{FruitReport, GradeOptions, ModelKind};

pub type Image = imaging::Image<f32>;
pub type Tensor = nn::Tensor<f32>;
pub type Network = nn::Network<f32>;
pub type PipelineModel = pipeline::PipelineModel<f32>;

pub type Image64 = imaging::Image<f64>;
pub type Tensor64 = nn::Tensor<f64>;
pub type Network64 = nn::Network<f64>;
pub type PipelineModel64 = pipeline::PipelineModel<f64>;
