//! Dense tensors, a recording tape for reverse-mode gradients, and the
//! seeded random streams every other module draws from.

mod rng;
mod tape;
mod tensor;

pub use rng::{seeded_rng, SeedStream};
pub use tape::{BatchStats, GradientStore, NormMode, OpKind, ParamId, Tape, Var, EPS, NORM_EPS};
pub use tensor::Tensor;
