//! Minimal differentiable tensor engine.

pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::grad_check;
pub use params::ParamStore;
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;
