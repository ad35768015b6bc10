pub mod assignment;
pub mod datagen;
pub mod dataset;
pub mod debugger;
pub mod error;
pub mod experiments;
pub mod explain;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
