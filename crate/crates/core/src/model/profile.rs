//! Closed-form parameter and multiply-accumulate accounting.
//!
//! These are computed from the config alone, without building the model;
//! tests cross-check them against the constructed parameter map.

use serde::{Deserialize, Serialize};

use super::config::{EncoderMode, ModelConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Profile {
    pub params: u64,
    pub macs: u64,
    pub embed_params: u64,
    pub encoder_params: u64,
    pub head_params: u64,
    pub embed_macs: u64,
    pub encoder_macs: u64,
    pub head_macs: u64,
}

fn linear_params(fan_in: usize, fan_out: usize) -> u64 {
    (fan_in * fan_out + fan_out) as u64
}

fn norm_params(width: usize) -> u64 {
    2 * width as u64
}

/// Attention block over width `w`: qkv + output projection.
fn attention_params(w: usize) -> u64 {
    linear_params(w, 3 * w) + linear_params(w, w)
}

/// Linear layers plus the two attention products for `t` tokens of width `w`.
fn attention_macs(t: usize, w: usize) -> u64 {
    let projections = t * (w * 3 * w + w * w);
    let products = 2 * t * t * w;
    (projections + products) as u64
}

/// Parameters of one encoder block.
pub fn encoder_params(config: &ModelConfig) -> u64 {
    let (c, w, v) = (config.channels, config.mix_width(), config.num_levels());
    let mut total = 2 * norm_params(w);
    if !config.disable_itmm {
        total += match config.encoder_mode {
            EncoderMode::Decoupled => v as u64 * attention_params(c),
            _ => attention_params(w),
        };
    }
    if !config.disable_icmm {
        let hidden = match config.encoder_mode {
            EncoderMode::CoupledFull => config.ffn_hidden(),
            _ => config.bottleneck(),
        };
        total += linear_params(w, hidden) + linear_params(hidden, w);
    }
    total
}

pub fn profile(config: &ModelConfig) -> Profile {
    let (c, w, v) = (config.channels, config.mix_width(), config.num_levels());
    let (l, t) = (config.tokens(), config.seq_len());

    let mut embed_params = 0;
    let mut embed_macs = 0;
    for &level in &config.levels {
        let (d, h) = (config.patch_dim(level), config.embed_hidden(level));
        embed_params += norm_params(d)
            + linear_params(d, h)
            + linear_params(h, c)
            + norm_params(c)
            + c as u64
            + (t * c) as u64;
        embed_macs += (l * (d * h + h * c)) as u64;
    }

    let encoder_params = config.depth as u64 * encoder_params(config);
    let mut per_encoder_macs = 0;
    if !config.disable_itmm {
        per_encoder_macs += match config.encoder_mode {
            EncoderMode::Decoupled => v as u64 * attention_macs(t, c),
            _ => attention_macs(t, w),
        };
    }
    if !config.disable_icmm {
        let hidden = match config.encoder_mode {
            EncoderMode::CoupledFull => config.ffn_hidden(),
            _ => config.bottleneck(),
        };
        per_encoder_macs += (2 * t * w * hidden) as u64;
    }
    let encoder_macs = config.depth as u64 * per_encoder_macs;

    let head_params = norm_params(w) + linear_params(w, config.genes);
    let head_macs = (w * config.genes) as u64;

    Profile {
        params: embed_params + encoder_params + head_params,
        macs: embed_macs + encoder_macs + head_macs,
        embed_params,
        encoder_params,
        head_params,
        embed_macs,
        encoder_macs,
        head_macs,
    }
}

pub fn param_count(config: &ModelConfig) -> u64 {
    profile(config).params
}

pub fn mac_count(config: &ModelConfig) -> u64 {
    profile(config).macs
}
