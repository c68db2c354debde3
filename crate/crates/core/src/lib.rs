pub mod asr;
pub mod avbert;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod masking;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod vq;

pub use error::{Error, Result};
