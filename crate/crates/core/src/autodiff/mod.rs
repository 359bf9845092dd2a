//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records operations as they are evaluated; [`Tape::backward`] walks it
//! in reverse once. Learnable tensors live in a [`ParamSet`] outside the tape and
//! are bound as leaves for each forward pass.

mod adam;
mod checkpoint;
mod conv;
mod gemm;
mod norm;
mod ops;
mod params;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{Checkpoint, MAGIC};
pub use conv::Padding;
pub use norm::{Mode, RunningStats, BN_EPS, BN_MOMENTUM};
pub use ops::{sigmoid, BCE_EPS};
pub use params::{Bound, Param, ParamId, ParamSet};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

pub(crate) use gemm::dot;
