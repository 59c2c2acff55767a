pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Result, SodError};
