//! Mask decoder: prompt/point attention refinement and the mask, score and CLIP heads.

mod decoder;
mod heads;

use crate::autograd::Tensor;

pub use decoder::{Decoded, DecoderConfig, MaskDecoder};
pub use heads::{token_rows, Heads, CLIP_NORM_EPS};

/// Per-object outputs of one prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPrediction {
    /// `M×N`.
    pub mask_logits: Tensor,
    /// `sigmoid(mask_logits)`.
    pub mask_probs: Tensor,
    pub scores: Vec<f32>,
    /// `M×D_clip`, unit rows.
    pub clip_embeddings: Tensor,
    /// `M·P×N`: one mask per click slot (rows of padded slots are meaningless).
    /// Only produced in training mode.
    pub aux_logits: Option<Tensor>,
}

impl MaskPrediction {
    pub fn n_objects(&self) -> usize {
        self.mask_logits.rows()
    }

    /// Mask of object `m` binarized at `threshold`.
    pub fn binary_mask(&self, m: usize, threshold: f32) -> Vec<bool> {
        self.mask_probs.row(m).iter().map(|p| *p > threshold).collect()
    }
}
