pub mod allocation;
pub mod census;
pub mod dgm;
pub mod error;
pub mod estimators;
pub mod glmfit;
pub mod harness;
pub mod rng;
pub mod sensitivity;

pub use error::{Error, Result};
pub use nalgebra;
