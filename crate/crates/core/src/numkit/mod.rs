//! Dense `f32` numerics: tensors, a reverse-mode tape, seeded random streams,
//! an Adam optimiser and the `PBW1` weight container.

mod gradcheck;
mod graph;
mod optim;
mod params;
pub mod rng;
mod tensor;
pub mod weights;

pub use gradcheck::{check_gradients, GradCheck};
pub use graph::{Gradients, Graph, PairRotation, Var};
pub use optim::{clip_grad_norm, Adam, AdamConfig};
pub use params::Params;
pub use tensor::Tensor;
