pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod scalar;
pub mod sparse;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Result, StgcnError};
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type CsrMatrix = sparse::CsrMatrix<f64>;
pub type WeightedGraph = graph::WeightedGraph<f64>;
pub type LaplacianBundle = graph::LaplacianBundle<f64>;
pub type LaplacianBundle32 = graph::LaplacianBundle<f32>;
pub type StgcnModel = layers::StgcnModel<f64>;
pub type StgcnModel32 = layers::StgcnModel<f32>;
