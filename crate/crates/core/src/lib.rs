//! Distill a frozen image classifier into a small student while learning a
//! pixel-level explainer of the teacher's decisions.

pub mod arch;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod explainer;
pub mod losses;
pub mod ops;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
