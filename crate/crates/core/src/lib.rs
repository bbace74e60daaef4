//! MeDiVLAD: label-free self-distillation pretraining of a small vision
//! transformer plus dual-level VLAD aggregation for multi-level
//! lung-ultrasound severity scoring.

pub mod aggregate;
pub mod checkpoint;
pub mod data;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod finetune;
pub mod frame;
pub mod numerics;
pub mod optim;
pub mod params;
pub mod rng;

pub use error::{Error, Result};
pub use numerics::{Graph, Tensor, Var};
pub use rng::SeedStream;
