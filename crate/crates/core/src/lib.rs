pub mod atm;
pub mod backbone;
pub mod error;
pub mod gradsuite;
pub mod harness;
pub mod interact;
pub mod nn;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
