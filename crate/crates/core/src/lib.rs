pub mod checkpoint;
pub mod ctc;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod features;
pub mod model;
pub mod nn;
mod par;
pub mod rng;
pub mod slu;
pub mod train;

pub use error::{Error, Result};
