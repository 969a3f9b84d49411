use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// How the visual tokens enter the sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VisualMode {
    /// `I_image ‖ I_text`, `2H` rows.
    #[default]
    Full,
    /// Drops `I_text`; only the visual-view rows remain.
    NoTextView,
    /// Drops `I_image`; only the textual-view rows remain.
    NoImageView,
    /// No compression: every projected region row is kept.
    Uncompressed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Pools image, entity and relation states and runs two affine maps.
    #[default]
    Completion,
    /// One affine map from the last position's hidden state.
    Plain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Model width `D`.
    pub d_model: usize,
    /// Attention heads `H`; also the number of compressed tokens per view.
    pub heads: usize,
    pub layers: usize,
    pub vocab_size: usize,
    /// Images per entity `N`.
    pub n_images: usize,
    /// Regions per image `M`, not counting the CLS region.
    pub n_regions: usize,
    /// Visual feature width `E_i`.
    pub visual_dim: usize,
    pub max_seq: usize,
    /// Entity count `r`; width of the score vector.
    pub num_entities: usize,
    pub mlp_hidden: usize,
    #[serde(default = "yes")]
    pub layer_norm: bool,
    #[serde(default)]
    pub visual_mode: VisualMode,
    #[serde(default)]
    pub head: HeadKind,
}

fn yes() -> bool {
    true
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Region rows per entity, CLS included: `N (M + 1)`.
    pub fn visual_rows(&self) -> usize {
        self.n_images * (self.n_regions + 1)
    }

    /// Number of visual rows placed in front of the text tokens.
    pub fn visual_tokens(&self) -> usize {
        match self.visual_mode {
            VisualMode::Full => 2 * self.heads,
            VisualMode::NoTextView | VisualMode::NoImageView => self.heads,
            VisualMode::Uncompressed => self.visual_rows(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("vocab_size", self.vocab_size),
            ("n_images", self.n_images),
            ("n_regions", self.n_regions),
            ("visual_dim", self.visual_dim),
            ("max_seq", self.max_seq),
            ("num_entities", self.num_entities),
            ("mlp_hidden", self.mlp_hidden),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(invalid(format!("model.{name} must be at least 1")));
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(invalid(format!(
                "model.d_model ({}) must be divisible by model.heads ({})",
                self.d_model, self.heads
            )));
        }
        if self.visual_tokens() > self.max_seq {
            return Err(invalid(format!(
                "model.max_seq ({}) cannot hold {} visual tokens",
                self.max_seq,
                self.visual_tokens()
            )));
        }
        Ok(())
    }
}
