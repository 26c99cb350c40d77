//! Dense tensors with a dynamically recorded reverse-mode autodiff tape.

mod array;
mod conv;
mod gradcheck;
mod graph;
mod ops;

pub use array::{numel, Tensor};
pub use conv::PatchGeom;
pub use gradcheck::{gradcheck, relative_error, GradcheckOptions, GradcheckReport};
pub use graph::{BackwardFn, Graph, Var};
pub use ops::{broadcast_shape, concat, permute_tensor, sigmoid, BinaryOp, LEAKY_SLOPE};

pub(crate) use ops::gemm;
