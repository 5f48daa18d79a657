pub mod autograd;
pub mod checkpoint;
pub mod cnn;
pub mod corpus;
pub mod disentangle;
pub mod error;
pub mod evalsuite;
pub mod gradcheck;
pub mod losses;
pub mod mask_model;
pub mod nn;
pub mod senti_mlm;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Segments, Tensor};
