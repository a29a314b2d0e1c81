pub mod ablation;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod field;
pub mod forecaster;
pub mod global;
pub mod gradcheck;
pub mod mixer;
pub mod nn;
pub mod ops;
pub mod tensor;
pub mod train;
pub mod verify;

pub use autodiff::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use tensor::{Real, Tensor};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Graph64 = Graph<f64>;
pub type Graph32 = Graph<f32>;
