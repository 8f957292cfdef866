pub mod ae;
pub mod diffusion;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod nn;
pub mod pipeline;
pub mod tts;

pub use error::{LsError, Result};
