pub mod atlas;
pub mod cli;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod hips;
pub mod image;
pub mod labels;
pub mod nifti;
pub mod pipeline;
pub mod qc;
pub mod registration;

pub use error::{Error, Result};
