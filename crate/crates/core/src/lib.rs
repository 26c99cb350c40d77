pub mod cli;
pub mod data;
pub mod error;
pub mod flowcomp;
pub mod focal;
pub mod geom;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod propagation;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
