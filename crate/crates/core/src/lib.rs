//! Multi-task dense prediction with a deformable mixer encoder and a
//! task-aware transformer decoder, built on a small reverse-mode tape.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod loss;
pub mod metrics;
pub mod mixer;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;

pub use autodiff::{Fault, Gradients, Tape, Var};
pub use error::{DemtError, Result};
pub use nn::{Ctx, Mode};
pub use params::{ParamId, ParamKind, ParamStore};
pub use tensor::Tensor;
