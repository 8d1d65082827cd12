//! Shared fixtures for the benchmarks.
use m2ort_core::model::{ModelConfig, Variant};

/// A model small enough to step many times per second on one core.
pub fn bench_config() -> ModelConfig {
    ModelConfig {
        depth: 2,
        heads: 2,
        channels: 32,
        patch: 16,
        genes: 50,
        height: 64,
        width: 64,
        ..ModelConfig::variant(Variant::Small)
    }
}
