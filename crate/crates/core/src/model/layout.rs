//! Parameter naming, shapes and initialization.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::config::{EncoderMode, ModelConfig};
use crate::rng::StreamRng;
use crate::tensor::{ParamStore, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// `U(-1/√fan_in, 1/√fan_in)`
    Uniform { fan_in: usize },
    Zeros,
    Ones,
    /// `N(0, 0.02²)` for [cls] tokens and positional tables.
    Normal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

pub(crate) fn ldpe(level: usize) -> String {
    format!("ldpe{level}")
}

pub(crate) fn enc(n: usize) -> String {
    format!("enc{n}")
}

fn push_linear(out: &mut Vec<ParamSpec>, prefix: &str, fan_in: usize, fan_out: usize) {
    out.push(ParamSpec {
        name: format!("{prefix}.weight"),
        shape: vec![fan_in, fan_out],
        init: Init::Uniform { fan_in },
    });
    out.push(ParamSpec {
        name: format!("{prefix}.bias"),
        shape: vec![fan_out],
        init: Init::Zeros,
    });
}

fn push_norm(out: &mut Vec<ParamSpec>, prefix: &str, width: usize) {
    out.push(ParamSpec {
        name: format!("{prefix}.gamma"),
        shape: vec![width],
        init: Init::Ones,
    });
    out.push(ParamSpec {
        name: format!("{prefix}.beta"),
        shape: vec![width],
        init: Init::Zeros,
    });
}

/// Every parameter the model holds, in construction (and checkpoint) order.
pub fn param_specs(config: &ModelConfig) -> Vec<ParamSpec> {
    let c = config.channels;
    let mut out = Vec::new();
    for &l in &config.levels {
        let p = ldpe(l);
        push_norm(&mut out, &format!("{p}.norm_in"), config.patch_dim(l));
        push_linear(&mut out, &format!("{p}.fc1"), config.patch_dim(l), config.embed_hidden(l));
        push_linear(&mut out, &format!("{p}.fc2"), config.embed_hidden(l), c);
        push_norm(&mut out, &format!("{p}.norm_out"), c);
        out.push(ParamSpec {
            name: format!("level{l}.cls"),
            shape: vec![1, c],
            init: Init::Normal,
        });
        out.push(ParamSpec {
            name: format!("level{l}.pos"),
            shape: vec![config.seq_len(), c],
            init: Init::Normal,
        });
    }
    let w = config.mix_width();
    for n in 0..config.depth {
        let e = enc(n);
        push_norm(&mut out, &format!("{e}.norm1"), w);
        if !config.disable_itmm {
            if config.is_coupled() {
                push_linear(&mut out, &format!("{e}.itmm.qkv"), w, 3 * w);
                push_linear(&mut out, &format!("{e}.itmm.proj"), w, w);
            } else {
                for &l in &config.levels {
                    push_linear(&mut out, &format!("{e}.itmm{l}.qkv"), c, 3 * c);
                    push_linear(&mut out, &format!("{e}.itmm{l}.proj"), c, c);
                }
            }
        }
        push_norm(&mut out, &format!("{e}.norm2"), w);
        if !config.disable_icmm {
            if config.encoder_mode == EncoderMode::CoupledFull {
                push_linear(&mut out, &format!("{e}.ffn.fc1"), w, config.ffn_hidden());
                push_linear(&mut out, &format!("{e}.ffn.fc2"), config.ffn_hidden(), w);
            } else {
                push_linear(&mut out, &format!("{e}.icmm.fc1"), w, config.bottleneck());
                push_linear(&mut out, &format!("{e}.icmm.fc2"), config.bottleneck(), w);
            }
        }
    }
    push_norm(&mut out, "final_norm", w);
    push_linear(&mut out, "head", w, config.genes);
    out
}

/// Draws every parameter from the init stream in `param_specs` order.
pub fn init_params<T: Scalar>(config: &ModelConfig, rng: &mut StreamRng) -> ParamStore<T> {
    let normal = Normal::new(0.0, 0.02).expect("valid std");
    let mut store = ParamStore::new();
    for spec in param_specs(config) {
        let n: usize = spec.shape.iter().product();
        let data: Vec<T> = match spec.init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::Uniform { fan_in } => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                (0..n)
                    .map(|_| T::lit(rng.random_range(-bound..bound)))
                    .collect()
            }
            Init::Normal => (0..n).map(|_| T::lit(normal.sample(rng))).collect(),
        };
        store.insert(
            spec.name,
            Tensor::new(spec.shape, data).expect("spec shapes are positive"),
        );
    }
    store
}
