//! Many-to-one multi-magnification regression transformer for predicting
//! spot-level gene expression from pathology image pyramids.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{Checkpoint, EncoderMode, M2ort, ModelConfig, Mode, MultiScaleBatch, Variant};
pub use tensor::{Graph, ParamStore, Scalar, Tensor, Var};
