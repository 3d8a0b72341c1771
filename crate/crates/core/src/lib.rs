pub mod analysis;
pub mod attention;
pub mod blocks;
pub mod diffusion;
pub mod error;
pub mod harness;
pub mod nn;
pub mod ssm;
pub mod tensor;

pub use error::{Error, Result};
