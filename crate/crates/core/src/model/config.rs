use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the encoder mixes information across magnification levels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    /// Per-level attention followed by a shared channel-mixing bottleneck.
    Decoupled,
    /// One attention block over the channel-concatenated levels.
    CoupledAttention,
    /// Coupled attention plus a 4x feed-forward block in place of the
    /// bottleneck.
    CoupledFull,
}

impl EncoderMode {
    pub const ALL: [EncoderMode; 3] = [
        EncoderMode::Decoupled,
        EncoderMode::CoupledAttention,
        EncoderMode::CoupledFull,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EncoderMode::Decoupled => "decoupled",
            EncoderMode::CoupledAttention => "coupled_attention",
            EncoderMode::CoupledFull => "coupled_full",
        }
    }
}

impl fmt::Display for EncoderMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EncoderMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EncoderMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown encoder mode {s:?}")))
    }
}

/// Named size presets: (encoder depth, heads, channels).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Small,
    Base,
    Large,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Small, Variant::Base, Variant::Large];

    pub fn dims(self) -> (usize, usize, usize) {
        match self {
            Variant::Small => (6, 3, 192),
            Variant::Base => (8, 4, 256),
            Variant::Large => (12, 6, 384),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Small => "small",
            Variant::Base => "base",
            Variant::Large => "large",
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown variant {s:?}")))
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of stacked encoders.
    pub depth: usize,
    pub heads: usize,
    /// Embedding channels per level.
    pub channels: usize,
    /// Level-0 patch side; level `i` uses `patch / 2^i`.
    pub patch: usize,
    /// Probability that an attention score is zeroed during training.
    pub mask_prob: f64,
    /// Output gene count.
    pub genes: usize,
    /// Level-0 crop height in pixels.
    pub height: usize,
    /// Level-0 crop width in pixels.
    pub width: usize,
    /// Dropout rate inside the channel-mixing block.
    pub dropout: f64,
    /// Active magnification levels, ascending, subset of {0, 1, 2}.
    pub levels: Vec<usize>,
    pub encoder_mode: EncoderMode,
    pub disable_itmm: bool,
    pub disable_icmm: bool,
}

pub const MAX_LEVEL: usize = 2;
pub const LAYER_NORM_EPS: f64 = 1e-5;

impl ModelConfig {
    pub fn variant(v: Variant) -> Self {
        let (depth, heads, channels) = v.dims();
        Self {
            depth,
            heads,
            channels,
            patch: 16,
            mask_prob: 0.1,
            genes: 250,
            height: 224,
            width: 224,
            dropout: 0.1,
            levels: vec![0, 1, 2],
            encoder_mode: EncoderMode::Decoupled,
            disable_itmm: false,
            disable_icmm: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.heads == 0 || self.channels == 0 {
            return bad("heads and channels must be positive".into());
        }
        if !self.channels.is_multiple_of(4 * self.heads) {
            return bad(format!(
                "channels ({}) must be divisible by 4 * heads ({})",
                self.channels,
                4 * self.heads
            ));
        }
        if self.patch == 0 || !self.patch.is_multiple_of(4) {
            return bad(format!("patch ({}) must be a positive multiple of 4", self.patch));
        }
        if self.height == 0 || self.width == 0 {
            return bad("crop extents must be positive".into());
        }
        if !self.height.is_multiple_of(self.patch) || !self.width.is_multiple_of(self.patch) {
            return bad(format!(
                "crop {}x{} is not divisible by patch {}",
                self.height, self.width, self.patch
            ));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return bad(format!("mask_prob {} outside [0, 1]", self.mask_prob));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.genes == 0 {
            return bad("genes must be at least 1".into());
        }
        if self.levels.is_empty()
            || self.levels.iter().any(|&l| l > MAX_LEVEL)
            || self.levels.windows(2).any(|w| w[0] >= w[1])
        {
            return bad(format!(
                "levels {:?} must be a non-empty ascending subset of {{0, 1, 2}}",
                self.levels
            ));
        }
        if self.disable_itmm && self.disable_icmm {
            return bad("at most one of disable_itmm / disable_icmm may be set".into());
        }
        Ok(())
    }

    /// Tokens per level, `H·W / p²`.
    pub fn tokens(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    /// Sequence length including the [cls] token.
    pub fn seq_len(&self) -> usize {
        self.tokens() + 1
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn patch_side(&self, level: usize) -> usize {
        self.patch >> level
    }

    /// Image extents `(height, width)` at a level.
    pub fn level_extent(&self, level: usize) -> (usize, usize) {
        (self.height >> level, self.width >> level)
    }

    /// Flattened patch width `(p / 2^i)² · 3`.
    pub fn patch_dim(&self, level: usize) -> usize {
        let s = self.patch_side(level);
        s * s * 3
    }

    /// Latent width of the level's patch embedding: `3C / 2^i`.
    pub fn embed_hidden(&self, level: usize) -> usize {
        (3 * self.channels) >> level
    }

    /// Channel width of the concatenated levels.
    pub fn mix_width(&self) -> usize {
        self.num_levels() * self.channels
    }

    /// Bottleneck width of the channel-mixing block, `⌈2·v·C / 3⌉`
    /// (exactly `2C` for three levels).
    pub fn bottleneck(&self) -> usize {
        (2 * self.mix_width()).div_ceil(3)
    }

    pub fn ffn_hidden(&self) -> usize {
        4 * self.mix_width()
    }

    pub fn is_coupled(&self) -> bool {
        self.encoder_mode != EncoderMode::Decoupled
    }

    /// Fields that must agree between a checkpoint and the model reading it.
    pub fn architecture_diff(&self, other: &ModelConfig) -> Vec<&'static str> {
        let mut diff = Vec::new();
        macro_rules! cmp {
            ($($f:ident),*) => {$(
                if self.$f != other.$f {
                    diff.push(stringify!($f));
                }
            )*};
        }
        cmp!(
            depth,
            heads,
            channels,
            patch,
            genes,
            height,
            width,
            levels,
            encoder_mode,
            disable_itmm,
            disable_icmm
        );
        diff
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::variant(Variant::Base)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for v in Variant::ALL {
            ModelConfig::variant(v).validate().unwrap();
        }
        let base = ModelConfig::variant(Variant::Base);
        assert_eq!(base.tokens(), 196);
        assert_eq!(base.seq_len(), 197);
        assert_eq!(base.patch_dim(2), 48);
        assert_eq!(base.embed_hidden(0), 768);
        assert_eq!(base.embed_hidden(1), 384);
        assert_eq!(base.embed_hidden(2), 192);
        assert_eq!(base.bottleneck(), 512);
    }

    #[test]
    fn rejects_bad_configs() {
        let ok = ModelConfig::variant(Variant::Small);
        type Edit = Box<dyn Fn(&mut ModelConfig)>;
        let cases: Vec<Edit> = vec![
            Box::new(|c| c.channels = 190),
            Box::new(|c| c.patch = 10),
            Box::new(|c| c.height = 200),
            Box::new(|c| c.mask_prob = 1.5),
            Box::new(|c| c.genes = 0),
            Box::new(|c| c.levels = vec![]),
            Box::new(|c| c.levels = vec![1, 0]),
            Box::new(|c| c.levels = vec![3]),
            Box::new(|c| {
                c.disable_icmm = true;
                c.disable_itmm = true
            }),
        ];
        for f in cases {
            let mut c = ok.clone();
            f(&mut c);
            assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))), "{c:?}");
        }
    }

    #[test]
    fn single_level_bottleneck_keeps_ratio() {
        let mut c = ModelConfig::variant(Variant::Base);
        c.levels = vec![0];
        assert_eq!(c.bottleneck(), 171);
        c.levels = vec![0, 2];
        assert_eq!(c.bottleneck(), 342);
    }

    #[test]
    fn encoder_mode_parses() {
        assert_eq!(
            "coupled_full".parse::<EncoderMode>().unwrap(),
            EncoderMode::CoupledFull
        );
        assert!("nope".parse::<EncoderMode>().is_err());
    }
}
