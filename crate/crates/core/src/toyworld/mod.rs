//! Procedural shape world: rendering, training data, flow-matching training,
//! feature encoders and the evaluation harness.

pub mod dataset;
pub mod encoder;
pub mod eval;
pub mod render;
pub mod train;

pub use dataset::{ExampleMix, WorldGeometry};
pub use encoder::{EncoderConfig, EncoderKind, FeatureEncoder};
pub use eval::{EvalContext, EvalReport, Method};
pub use render::{render_sample, ShapeSpec, NUM_CLASSES};
pub use train::{Checkpoint, TrainConfig};
