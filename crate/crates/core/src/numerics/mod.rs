//! Dense tensors, a reverse-mode tape, optimizers and the checkpoint format.

pub mod alloc;
pub mod checkpoint;
pub mod gradcheck;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use optim::{Adam, SgdMomentum};
pub use params::{ParamId, ParamStore};
pub use tape::{AttnMask, Tape, Var};
pub use tensor::{Precision, Tensor};

#[cfg(test)]
mod tests;
