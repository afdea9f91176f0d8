//! Training engine that periodically grows and prunes neurons based on
//! class-reweighted accumulated gradient magnitude.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod container;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod idx;
mod kernels;
pub mod ledger;
pub mod model;
pub mod optim;
pub mod plasticity;
pub mod report;
pub mod suite;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Graph, Mode, Var};
pub use error::{Error, Result};
pub use model::{NetworkState, NeuronRef};
pub use tensor::Tensor;
