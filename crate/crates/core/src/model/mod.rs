//! The many-to-one regression transformer: level-dependent patch embedding,
//! per-level [cls] and positional tables, stacked encoders (per-level
//! token mixing plus cross-level channel mixing) and a linear regression
//! head on the fused [cls] features.

mod checkpoint;
mod config;
mod layout;
mod net;
pub mod profile;

pub use checkpoint::{Checkpoint, CheckpointMeta, FORMAT_VERSION, MANIFEST_FILE, WEIGHTS_FILE};
pub use config::{EncoderMode, ModelConfig, Variant, LAYER_NORM_EPS, MAX_LEVEL};
pub use layout::{param_specs, Init, ParamSpec};
pub use net::{patchify, rmsa, Bound, M2ort, Mode, MultiScaleBatch};
pub use profile::{mac_count, param_count, Profile};
