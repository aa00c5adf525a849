pub mod data;
pub mod engine;
pub mod error;
pub mod filters;
pub mod graph;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod raster;
pub mod redundancy;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
