pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod metrics;
pub mod models;
pub mod params;
pub mod slim;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
