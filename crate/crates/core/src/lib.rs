pub mod error;
pub mod federation;
pub mod glm;
pub mod glmm;
pub mod moments;
pub mod pseudogen;
pub mod simharness;

pub use error::{Error, Result};
