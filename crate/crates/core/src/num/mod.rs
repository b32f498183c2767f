//! Numeric kernel: dense tensors, the autodiff tape, layers, AdamW, the
//! checkpoint format, and finite-difference gradient verification.

pub mod checkpoint;
pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod signal;
pub mod tape;
pub mod tensor;

pub use tape::{Tape, Var};
pub use tensor::Tensor;
