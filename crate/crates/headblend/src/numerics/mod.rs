//! Minimal dense-tensor math with reverse-mode gradients, a deterministic
//! seeded RNG, and a finite-difference oracle for checking the gradients.

pub mod fdcheck;
pub mod real;
pub mod rng;
pub mod tape;

pub use fdcheck::{finite_difference_gradient, max_rel_err};
pub use real::Real;
pub use rng::Rng;
pub use tape::{NumericsError, Tape, TensorData, Vid};
