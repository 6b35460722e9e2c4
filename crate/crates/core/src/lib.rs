pub mod data;
pub mod error;
pub mod eval;
pub mod growth;
pub mod model;
pub mod par;
pub mod seed;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
