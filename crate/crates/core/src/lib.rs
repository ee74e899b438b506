pub mod augment;
pub mod autodiff;
pub mod dataset;
pub mod error;
pub mod evaluator;
pub mod losses;
pub mod model;
pub mod optimizer;
pub mod trainer;

pub use error::{Error, Result};
