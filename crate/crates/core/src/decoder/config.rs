use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape and switches of the decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Instance queries `K`.
    pub queries: usize,
    /// Feature width `C`.
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    /// Superpoint refinement runs after every `refine_every`-th layer.
    pub refine_every: usize,
    /// Sine-cosine width per encoded scalar.
    pub sincos_width: usize,
    pub mask_threshold: f64,
    pub category_count: usize,
    /// Learned superpoint aggregation; otherwise plain mean pooling.
    pub use_asam: bool,
    /// Box-relation bias in query self-attention.
    pub use_rsa: bool,
    /// Superpoint refinement and the contrastive taps.
    pub use_clsr: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            queries: 8,
            width: 32,
            heads: 8,
            layers: 6,
            refine_every: 3,
            sincos_width: 16,
            mask_threshold: 0.5,
            category_count: 4,
            use_asam: true,
            use_rsa: true,
            use_clsr: true,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: String| Err(Error::validation(field, why));
        if self.queries == 0 {
            return bad("queries", "need at least one query".into());
        }
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return bad("heads", format!("{} heads must divide width {}", self.heads, self.width));
        }
        if self.layers == 0 {
            return bad("layers", "need at least one layer".into());
        }
        if self.refine_every == 0 {
            return bad("refine_every", "must be at least 1".into());
        }
        if self.sincos_width == 0 || self.sincos_width % 2 != 0 {
            return bad("sincos_width", format!("must be even and positive, got {}", self.sincos_width));
        }
        if !(self.mask_threshold > 0.0 && self.mask_threshold < 1.0) {
            return bad("mask_threshold", "must lie in (0, 1)".into());
        }
        if self.category_count == 0 {
            return bad("category_count", "need at least one category".into());
        }
        Ok(())
    }

    /// Layers (1-based) after which superpoints are refined.
    pub fn refinement_layers(&self) -> Vec<usize> {
        if !self.use_clsr {
            return Vec::new();
        }
        (1..=self.layers).filter(|l| l % self.refine_every == 0).collect()
    }
}
