pub mod backbone;
pub mod dcn;
pub mod detector;
pub mod error;
pub mod eval;
pub mod features;
pub mod geom;
pub mod image;
pub mod loss;
pub mod pipeline;
pub mod selftest;
pub mod synth;
pub mod tensor;
pub mod weights;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
