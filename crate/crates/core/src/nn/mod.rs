//! Minimal tensor engine: dense tensors, a reverse-mode tape, layers and an
//! optimizer. Generic over `f32` (training) and `f64` (gradient checks).

pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{Gradients, Graph, Segment, Var, KEEP_BASE};
pub use layers::{Conv2d, GroupNorm, LayerNorm, Linear};
pub use optim::{clip_global_norm, cosine_lr, AdamW};
pub use params::{ParamId, ParamStore};
pub use tensor::{Float, Tensor};
