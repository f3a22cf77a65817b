//! Dense tensor math with reverse-mode gradients, the Adam optimizer, and a
//! finite-difference gradient checker.

pub mod gradcheck;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::grad_check;
pub use params::{
    load_checkpoint, save_checkpoint, seeded_rng, AdamConfig, ParamStore,
};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
