use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volumes::Shape3;

/// Which modules use windowed attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Conv modules everywhere.
    Baseline,
    /// Attention in encoder levels below full resolution, conv decoder.
    TransEncoder,
    /// Attention in every decoder stage with a nonzero head count.
    TransDecoder,
    /// Both of the above.
    TransAll,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Baseline,
        Variant::TransEncoder,
        Variant::TransDecoder,
        Variant::TransAll,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::TransEncoder => "trans_encoder",
            Variant::TransDecoder => "trans_decoder",
            Variant::TransAll => "trans_all",
        }
    }

    fn encoder_attention(self) -> bool {
        matches!(self, Variant::TransEncoder | Variant::TransAll)
    }

    fn decoder_attention(self) -> bool {
        matches!(self, Variant::TransDecoder | Variant::TransAll)
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Module type at one pyramid level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Block {
    Conv,
    Swin { heads: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub affine_steps: usize,
    pub deform_steps: usize,
    pub encoder_dims: Vec<usize>,
    pub decoder_dims: Vec<usize>,
    pub attn_heads: Vec<usize>,
    pub window_size: Shape3,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::with_steps(1, 4)
    }
}

impl ModelConfig {
    /// Channel layout for `affine + deform` levels: encoder dims double
    /// from 8, decoder dims halve down to 16, one head per 16 decoder
    /// channels and a plain conv module at the finest stage.
    pub fn with_steps(affine_steps: usize, deform_steps: usize) -> Self {
        let levels = affine_steps + deform_steps;
        let encoder_dims = (0..levels).map(|i| 8 << i).collect();
        let decoder_dims: Vec<usize> = (0..levels).map(|i| 16 << (levels - 1 - i)).collect();
        let attn_heads = decoder_dims
            .iter()
            .enumerate()
            .map(|(i, d)| if i + 1 == levels { 0 } else { d / 16 })
            .collect();
        Self {
            affine_steps,
            deform_steps,
            encoder_dims,
            decoder_dims,
            attn_heads,
            window_size: [5, 5, 5],
            variant: Variant::TransDecoder,
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn levels(&self) -> usize {
        self.affine_steps + self.deform_steps
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.levels();
        if self.deform_steps == 0 {
            return Err(Error::Config("deform_steps must be at least 1".into()));
        }
        for (name, len) in [
            ("encoder_dims", self.encoder_dims.len()),
            ("decoder_dims", self.decoder_dims.len()),
            ("attn_heads", self.attn_heads.len()),
        ] {
            if len != l {
                return Err(Error::Config(format!("{name} has {len} entries, expected {l}")));
            }
        }
        if self.attn_heads[l - 1] != 0 {
            return Err(Error::Config("the finest decoder stage must be a conv module (heads 0)".into()));
        }
        if self.window_size.iter().any(|&w| w == 0) {
            return Err(Error::Config(format!("window size {:?} has a zero axis", self.window_size)));
        }
        if self.encoder_dims.iter().chain(&self.decoder_dims).any(|&d| d == 0) {
            return Err(Error::Config("channel dims must be positive".into()));
        }
        for &d in &self.decoder_dims[..l - 1] {
            if d % 2 != 0 {
                return Err(Error::Divisibility { channels: d, by: 2 });
            }
        }
        for i in 0..l {
            if let Block::Swin { heads } = self.encoder_block(i) {
                if self.encoder_dims[i] % heads != 0 {
                    return Err(Error::Divisibility { channels: self.encoder_dims[i], by: heads });
                }
            }
            if let Block::Swin { heads } = self.decoder_block(i + 1) {
                if self.decoder_dims[i] % heads != 0 {
                    return Err(Error::Divisibility { channels: self.decoder_dims[i], by: heads });
                }
            }
        }
        Ok(())
    }

    /// Module at encoder level `i` (0 = full resolution). Attention
    /// levels borrow the head count of the decoder stage at the same
    /// resolution; full resolution always stays convolutional.
    pub fn encoder_block(&self, level: usize) -> Block {
        let heads = self.attn_heads[self.levels() - 1 - level];
        if self.variant.encoder_attention() && level > 0 && heads > 0 {
            Block::Swin { heads }
        } else {
            Block::Conv
        }
    }

    /// Module at decoder stage `k` (1 = coarsest).
    pub fn decoder_block(&self, stage: usize) -> Block {
        let heads = self.attn_heads[stage - 1];
        if self.variant.decoder_attention() && heads > 0 {
            Block::Swin { heads }
        } else {
            Block::Conv
        }
    }

    pub fn is_affine_stage(&self, stage: usize) -> bool {
        stage <= self.affine_steps
    }

    /// Pyramid level (0 = full resolution) that stage `k` works on.
    pub fn stage_level(&self, stage: usize) -> usize {
        self.levels() - stage
    }

    pub fn shift(&self) -> Shape3 {
        self.window_size.map(|w| w / 2)
    }

    /// Per-level grid shapes, finest first.
    pub fn level_shapes(&self, input: Shape3) -> Result<Vec<Shape3>> {
        let l = self.levels();
        let min = 1usize << (l - 1);
        if input.iter().any(|&n| n < min) {
            return Err(Error::TooSmall { shape: input, levels: l, min });
        }
        let mut shapes = vec![input];
        for _ in 1..l {
            let prev = *shapes.last().unwrap();
            shapes.push(prev.map(|n| n.div_ceil(2)));
        }
        Ok(shapes)
    }

    /// Input channels of encoder level `i`.
    pub(crate) fn encoder_in(&self, level: usize) -> usize {
        if level == 0 {
            1
        } else {
            self.encoder_dims[level - 1]
        }
    }

    /// Input channels of decoder stage `k`: `[expand, F_f, F_m∘φ]`.
    pub(crate) fn decoder_in(&self, stage: usize) -> usize {
        let skip = 2 * self.encoder_dims[self.stage_level(stage)];
        if stage == 1 {
            skip
        } else {
            self.decoder_dims[stage - 2] / 2 + skip
        }
    }
}
