//! Dense tensors with reverse-mode differentiation.

mod gemm;
mod gradcheck;
mod params;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::check_gradients;
pub use params::{ParamGrads, ParamGroup, ParamId, ParamStore, Parameter, WeightSet};
pub use rng::RngStream;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Mask, Tensor};
