pub mod analysis;
pub mod blocks;
pub mod checks;
pub mod cli;
pub mod data;
pub mod error;
pub mod io;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{no_grad, Real, Tensor};
