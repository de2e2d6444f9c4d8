//! The frozen promptable-backbone abstraction.
//!
//! A backbone owns three frozen stages: an image encoder producing a dense
//! embedding `z_i`, a prompt encoder mapping a box annotation into the prompt
//! space, and a mask decoder turning `(z_i, prompt)` into a per-pixel
//! foreground probability map. Training never touches backbone parameters;
//! the trainable part of the system (the prompt generator) only feeds the
//! decoder a *learned* prompt in place of the encoded box.
//!
//! Two implementations ship here: [`toy::ToyBackbone`], a deterministic
//! desk-scale stand-in whose decoder is differentiable with respect to the
//! dense prompt, and [`external::FileBackbone`], which serves embeddings and
//! pseudo-labels exported to disk by an out-of-process model.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::domain::{BinaryMask, BoxAnnotation, EmbeddingTensor, Image, ProbabilityMap, PromptEmbedding};
use crate::error::{Error, Result};

pub mod cache;
pub mod external;
pub mod toy;

pub use cache::{precompute_embeddings, CacheManifest, EmbeddingCache, PrecomputeReport};
pub use external::FileBackbone;
pub use toy::{ToyBackbone, ToyBackboneConfig};

/// Static facts about a backbone.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneDescriptor {
    pub name: String,
    /// `C_e`
    pub embedding_channels: usize,
    /// `(H_e, W_e)`
    pub embedding_size: (usize, usize),
    /// `(H, W)` expected image extent.
    pub input_size: (usize, usize),
    /// Whether identical inputs always produce bit-identical outputs.
    pub deterministic: bool,
}

/// Pseudo-labels binarize the decoded probability map at this (inclusive)
/// threshold.
pub const PSEUDO_LABEL_THRESHOLD: f64 = 0.5;

/// A frozen promptable segmentation backbone.
pub trait Backbone {
    fn descriptor(&self) -> &BackboneDescriptor;

    /// Encode an image into its dense embedding `z_i`.
    fn encode_image(&self, image: &Image) -> Result<EmbeddingTensor>;

    /// Encode a box annotation into the prompt space.
    fn encode_box_prompt(&self, b: &BoxAnnotation) -> Result<PromptEmbedding>;

    /// The prompt-space value meaning "no sparse prompt"; the learned prompt
    /// generator passes this through unchanged.
    fn default_sparse_embedding(&self) -> Array1<f64>;

    /// Decode `(z_i, prompt)` into a foreground probability map at image
    /// resolution.
    fn decode(&self, z: &EmbeddingTensor, prompt: &PromptEmbedding) -> Result<ProbabilityMap>;

    /// Gradient of `sum(upstream ⊙ decode(z, prompt))` with respect to
    /// `prompt.dense`. Only differentiable backbones (the toy one) support
    /// this; adapters that merely serve files do not.
    fn decode_grad_dense(
        &self,
        _z: &EmbeddingTensor,
        _prompt: &PromptEmbedding,
        _upstream: &ndarray::Array2<f64>,
    ) -> Result<ndarray::Array3<f64>> {
        Err(Error::Unsupported(format!(
            "backbone '{}' has no differentiable decoder",
            self.descriptor().name
        )))
    }

    /// The box-derived pseudo-label: decode the encoded box prompt and
    /// binarize at [`PSEUDO_LABEL_THRESHOLD`] (inclusive).
    fn prompted_pseudo_label(&self, image: &Image, b: &BoxAnnotation) -> Result<BinaryMask> {
        let z = self.encode_image(image)?;
        let prompt = self.encode_box_prompt(b)?;
        let p = self.decode(&z, &prompt)?;
        Ok(p.threshold(PSEUDO_LABEL_THRESHOLD))
    }

    /// Checksum over every frozen parameter; training must leave it
    /// untouched.
    fn parameter_checksum(&self) -> u64;
}
