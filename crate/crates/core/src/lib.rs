pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod head;
pub mod model;
pub mod seed;
pub mod tensor;
pub mod trainer;
pub mod triplet;

pub use error::{Error, Result};
