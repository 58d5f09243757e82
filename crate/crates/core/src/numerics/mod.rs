//! Dense tensors, reverse-mode differentiation, layers and AdamW.
//!
//! Everything runs in `f64` on a single thread; identical seeds give
//! bit-identical trajectories.

pub mod check;
mod graph;
mod layers;
mod optim;
mod params;
pub mod rng;
mod tensor;

pub use graph::{layer_norm_rows, sigmoid, Gradients, Graph, Var};
pub use layers::{layer_norm_apply, Dense, GruCell, Mlp};
pub use optim::{cosine_warmup_lr, AdamW, OptimizerState};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
pub(crate) use tensor::gemm;

#[cfg(test)]
mod tests;
