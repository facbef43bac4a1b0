//! Dense `f64` tensors, a recording tape for reverse-mode differentiation,
//! AdamW, gradient checking and the parameter archive format.

pub mod checkpoint;
pub mod gradcheck;
mod linalg;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use checkpoint::{Checkpoint, CheckpointError, CheckpointMeta};
pub use gradcheck::{finite_diff_check, param_grad_check, GradCheckReport};
pub use optim::{clip_grad_norm, AdamW, AdamWConfig};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{cross_entropy_loss, Gradients, Reduction, Tape, Var};
pub use tensor::{Tensor, TensorError, TensorResult};
