pub mod autograd;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
pub mod alignment;
pub mod attend;
pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod harness;
pub mod lafm;
pub mod model;
pub mod objective;
pub mod optim;
pub mod prior;
pub mod train;
