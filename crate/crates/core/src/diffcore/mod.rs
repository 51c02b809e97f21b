//! Dense arrays, a GELU MLP with forward- and reverse-mode derivatives,
//! Adam, EMA tracking and the binary tensor container.

mod array;
pub mod check;
pub mod container;
mod mlp;
mod optim;
mod scalar;

pub use array::DenseArray;
pub use container::{TensorPack, CHECKPOINT_MAGIC, DATASET_MAGIC};
pub use mlp::{no_times, DualOutput, Mlp, MlpSpec, NormPlacement, Tangent, Tape, TensorSlot};
pub use optim::{ema_update, OptimState};
pub use scalar::Scalar;
