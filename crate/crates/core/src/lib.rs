pub mod distill;
pub mod encoder;
pub mod error;
pub mod fewshot;
pub mod image;
pub mod numerics;
pub mod pipeline;
pub mod pooling;
pub mod surrogates;

pub use error::{Error, Result};
