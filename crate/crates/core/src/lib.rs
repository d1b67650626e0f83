pub mod analysis;
pub mod cli;
pub mod error;
pub mod model;
pub mod nn;
pub mod params;
pub mod patching;
pub mod tensor;
pub mod train;
pub mod transformer;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
