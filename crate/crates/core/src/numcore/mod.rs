//! Dense-tensor numerics: reverse-mode autodiff tape, the layer kernels the
//! model needs (convolution, pooling, affine, GRU cell, softmax
//! cross-entropy), and SGD-Nesterov / Adam with cosine annealing.

mod optim;
mod tape;
mod tensor;

pub use optim::{OptKind, Optimizer, OptimizerConfig, Schedule};
pub use tape::{gru_cell, GruIds, Tape, Tid};
pub use tensor::{softmax_row_f64, Tensor};
