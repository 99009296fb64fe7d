pub mod backbone;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod nn;
pub mod noisy_student;
pub mod seg_head;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
