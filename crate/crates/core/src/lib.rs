//! Three-stage coarse-to-fine camouflaged object segmentation.

pub mod autograd;
pub mod backbone;
pub mod bem;
pub mod checkpoint;
pub mod complexity;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod kernels;
pub mod loss;
pub mod metrics;
pub mod mfem;
pub mod mgfm;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use autograd::{Graph, Mode, Var};
pub use config::{Ablation, ModelConfig, NormKind, RunConfig};
pub use error::{Error, Result};
pub use params::{Builder, ParamId, ParamKind, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
