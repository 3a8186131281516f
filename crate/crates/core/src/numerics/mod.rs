//! Tensors, parameters, the differentiation tape and the random source.

mod feature_map;
pub mod gradcheck;
pub mod ops;
mod param;
mod rng;
mod tape;

pub use feature_map::{Dims, FeatureMap};
pub use gradcheck::{finite_difference_gradient, relative_error};
pub use param::{GradBuffer, ParamId, ParamStore, ParamTensor};
pub use rng::Rng;
pub use tape::{Gradients, Tape, Var};
