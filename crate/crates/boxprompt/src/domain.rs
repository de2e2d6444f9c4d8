//! Core vocabulary types shared by every module: images, box annotations,
//! masks, probability maps, embeddings, and the training configuration.
//!
//! Coordinate convention, used everywhere without exception: `x` indexes
//! columns, `y` indexes rows, the origin is the top-left pixel, and box
//! corners are inclusive. Arrays are indexed `[y, x]` (row-major), images and
//! embeddings `[channel, y, x]`.

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::TransformKind;
use crate::losses::PenaltyKind;

/// A preprocessed input image: 3 channels (grayscale replicated at load
/// time), values in `[0, 255]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pixels: Array3<f64>,
}

impl Image {
    /// Wrap a `(3, H, W)` pixel tensor.
    pub fn new(pixels: Array3<f64>) -> Result<Self> {
        let (c, h, w) = pixels.dim();
        if c != 3 {
            return Err(Error::Shape(format!("image must have 3 channels, got {c}")));
        }
        if h == 0 || w == 0 {
            return Err(Error::Shape(format!("image has empty extent ({h}x{w})")));
        }
        Ok(Self { pixels })
    }

    /// Replicate a single grayscale plane into the 3-channel layout.
    pub fn from_grayscale(plane: Array2<f64>) -> Result<Self> {
        let (h, w) = plane.dim();
        let mut pixels = Array3::zeros((3, h, w));
        for c in 0..3 {
            pixels.index_axis_mut(ndarray::Axis(0), c).assign(&plane);
        }
        Self::new(pixels)
    }

    pub fn pixels(&self) -> &Array3<f64> {
        &self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().2
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    /// Mean over channels at `(y, x)` — the grayscale value for replicated
    /// images.
    pub fn gray(&self, y: usize, x: usize) -> f64 {
        (self.pixels[[0, y, x]] + self.pixels[[1, y, x]] + self.pixels[[2, y, x]]) / 3.0
    }

    /// Content hash over shape and pixel bit patterns; used to detect stale
    /// cache entries.
    pub fn content_hash(&self) -> u64 {
        let mut h = crate::util::FNV_OFFSET;
        let (c, hh, ww) = self.pixels.dim();
        for d in [c, hh, ww] {
            h = crate::util::fnv1a64_extend(h, &(d as u64).to_le_bytes());
        }
        for v in self.pixels.iter() {
            h = crate::util::fnv1a64_extend(h, &v.to_bits().to_le_bytes());
        }
        h
    }
}

/// An axis-aligned bounding-box annotation with inclusive corners:
/// the box covers pixels `x_min..=x_max` by `y_min..=y_max`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoxAnnotation {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl BoxAnnotation {
    /// Build a box, enforcing strict corner ordering.
    pub fn new(x_min: usize, y_min: usize, x_max: usize, y_max: usize) -> Result<Self> {
        if x_min >= x_max || y_min >= y_max {
            return Err(Error::Box(format!(
                "corners must satisfy x_min < x_max and y_min < y_max, got \
                 ({x_min},{y_min})..({x_max},{y_max})"
            )));
        }
        Ok(Self { x_min, y_min, x_max, y_max })
    }

    /// Check the box lies inside an `(h, w)` image.
    pub fn validate_within(&self, h: usize, w: usize) -> Result<()> {
        if self.x_max > w.saturating_sub(1) || self.y_max > h.saturating_sub(1) {
            return Err(Error::Box(format!(
                "box ({},{})..({},{}) exceeds image bounds {}x{}",
                self.x_min, self.y_min, self.x_max, self.y_max, h, w
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.x_max - self.x_min + 1
    }

    pub fn height(&self) -> usize {
        self.y_max - self.y_min + 1
    }

    /// Pixel count of the box interior (inclusive corners).
    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }
}

/// A binary segmentation mask with values in `{0, 1}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    values: Array2<u8>,
}

impl BinaryMask {
    pub fn new(values: Array2<u8>) -> Result<Self> {
        if values.iter().any(|&v| v > 1) {
            return Err(Error::Shape("binary mask values must be 0 or 1".into()));
        }
        Ok(Self { values })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self { values: Array2::zeros((h, w)) }
    }

    /// Render a box annotation as a filled mask.
    pub fn from_box(b: &BoxAnnotation, h: usize, w: usize) -> Result<Self> {
        b.validate_within(h, w)?;
        let mut values = Array2::zeros((h, w));
        for y in b.y_min..=b.y_max {
            for x in b.x_min..=b.x_max {
                values[[y, x]] = 1;
            }
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Array2<u8> {
        &self.values
    }

    pub fn size(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.values[[y, x]]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        debug_assert!(v <= 1);
        self.values[[y, x]] = v;
    }

    pub fn count_foreground(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.values.iter().all(|&v| v == 0)
    }
}

/// A per-pixel foreground probability map, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    values: Array2<f64>,
}

impl ProbabilityMap {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::Shape("probabilities must be finite and in [0, 1]".into()));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn size(&self) -> (usize, usize) {
        self.values.dim()
    }

    /// Total predicted foreground mass (sum over all pixels).
    pub fn mass(&self) -> f64 {
        self.values.sum()
    }

    /// Binarize with an inclusive threshold: `p >= thr` maps to foreground.
    pub fn threshold(&self, thr: f64) -> BinaryMask {
        let values = self.values.mapv(|p| u8::from(p >= thr));
        BinaryMask { values }
    }
}

/// One dataset element: an image, its weak (box) annotation, and — when the
/// dataset has them — a full reference mask. The reference never enters
/// training; it exists for evaluation only.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub box_annotation: BoxAnnotation,
    pub reference_mask: Option<BinaryMask>,
}

impl Sample {
    /// Check internal consistency: the box lies within the image and the
    /// reference mask (if any) matches the image extent.
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image.size();
        self.box_annotation.validate_within(h, w).map_err(|e| {
            Error::Box(format!("sample '{}': {e}", self.id))
        })?;
        if let Some(m) = &self.reference_mask {
            if m.size() != (h, w) {
                return Err(Error::Shape(format!(
                    "sample '{}': reference mask is {:?} but the image is {:?}",
                    self.id,
                    m.size(),
                    (h, w)
                )));
            }
        }
        Ok(())
    }
}

/// The two pixel sets a box annotation induces on its image: `inside` is the
/// (closed) box interior, known to contain the object; `outside` is its
/// complement, known background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionPartition {
    inside: Array2<u8>,
    inside_count: usize,
    outside_count: usize,
}

impl RegionPartition {
    pub(crate) fn from_parts(inside: Array2<u8>, inside_count: usize, outside_count: usize) -> Self {
        Self { inside, inside_count, outside_count }
    }

    pub fn size(&self) -> (usize, usize) {
        self.inside.dim()
    }

    pub fn is_inside(&self, y: usize, x: usize) -> bool {
        self.inside[[y, x]] == 1
    }

    /// |Ω_I|: number of pixels inside the box.
    pub fn inside_count(&self) -> usize {
        self.inside_count
    }

    /// |Ω_O|: number of pixels outside the box.
    pub fn outside_count(&self) -> usize {
        self.outside_count
    }

    pub fn inside_mask(&self) -> BinaryMask {
        BinaryMask { values: self.inside.clone() }
    }

    pub fn outside_mask(&self) -> BinaryMask {
        BinaryMask { values: self.inside.mapv(|v| 1 - v) }
    }
}

/// A frozen-encoder image embedding: `(C_e, H_e, W_e)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTensor {
    values: Array3<f64>,
}

impl EmbeddingTensor {
    pub fn new(values: Array3<f64>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Array3<f64> {
        &mut self.values
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.values.dim()
    }

    /// Checksum over the float32 representation of the payload; matches the
    /// checksum of a serialized cache record for this tensor.
    pub fn checksum(&self) -> u64 {
        crate::util::checksum_f32_of(self.values.iter().copied())
    }
}

/// A prompt in the backbone's embedding space: a dense per-cell component
/// shaped like the image embedding, and a sparse vector component.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    pub dense: Array3<f64>,
    pub sparse: Array1<f64>,
}

/// Everything the training loop needs to know: loss weights, the size-band,
/// the barrier schedule, optimizer settings, and the transform pool for the
/// consistency term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the pseudo-label term.
    pub lambda_pseudo: f64,
    /// Weight of the size-constraint term.
    pub lambda_size: f64,
    /// Weight of the emptiness term.
    pub lambda_empty: f64,
    /// Weight of the transform-consistency term.
    pub lambda_cons: f64,
    /// Cross-entropy weight inside the pseudo-label term.
    pub alpha: f64,
    /// Dice weight inside the pseudo-label term.
    pub beta: f64,
    /// Lower size-band factor: predicted mass must reach `eps_low * |Ω_I|`.
    pub eps_low: f64,
    /// Upper size-band factor: predicted mass must stay below `eps_high * |Ω_I|`.
    pub eps_high: f64,
    /// Which penalty shapes the size constraint.
    pub penalty: PenaltyKind,
    /// Initial barrier weight t.
    pub barrier_t0: f64,
    /// Multiplicative growth factor for t.
    pub barrier_factor: f64,
    /// Raise t every this many epochs.
    pub barrier_every: usize,
    /// Base learning rate.
    pub lr: f64,
    /// Epoch at which the single x0.1 learning-rate drop happens.
    /// `None` means `epochs / 2`.
    pub lr_drop_epoch: Option<usize>,
    /// Decoupled weight decay.
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Master seed; all randomness derives from named sub-streams of it.
    pub seed: u64,
    /// Training-subset size drawn per trial by `run_trials` (0 = use all).
    pub subset_size: usize,
    /// Transform pool for the consistency term.
    pub transforms: Vec<TransformKind>,
}

impl Default for TrainConfig {
    /// The published training recipe: loss weights (1, 0.01, 0.001, 0.001),
    /// size band [0.7, 0.9], log-barrier with t raised x1.1 every 5 epochs,
    /// AdamW at lr 1e-4 (one x0.1 drop halfway) with weight decay 1e-4,
    /// batch 4, 200 epochs, 20-sample subsets, flip/rotation transforms.
    fn default() -> Self {
        Self {
            lambda_pseudo: 1.0,
            lambda_size: 0.01,
            lambda_empty: 0.001,
            lambda_cons: 0.001,
            alpha: 1.0,
            beta: 1.0,
            eps_low: 0.7,
            eps_high: 0.9,
            penalty: PenaltyKind::LogBarrier,
            barrier_t0: 5.0,
            barrier_factor: 1.1,
            barrier_every: 5,
            lr: 1e-4,
            lr_drop_epoch: None,
            weight_decay: 1e-4,
            batch_size: 4,
            epochs: 200,
            seed: 0,
            subset_size: 20,
            transforms: vec![
                TransformKind::Rot90,
                TransformKind::Rot180,
                TransformKind::Rot270,
                TransformKind::HFlip,
                TransformKind::VFlip,
            ],
        }
    }
}

impl TrainConfig {
    /// Effective epoch of the learning-rate drop.
    pub fn lr_drop_at(&self) -> usize {
        self.lr_drop_epoch.unwrap_or(self.epochs / 2)
    }
}

/// Validate a [`TrainConfig`], naming the first violated field.
pub fn validate_config(cfg: &TrainConfig) -> Result<()> {
    for (name, v) in [
        ("lambda_pseudo", cfg.lambda_pseudo),
        ("lambda_size", cfg.lambda_size),
        ("lambda_empty", cfg.lambda_empty),
        ("lambda_cons", cfg.lambda_cons),
        ("alpha", cfg.alpha),
        ("beta", cfg.beta),
    ] {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::Config(format!("negative loss weight: {name} = {v}")));
        }
    }
    if !(0.0..=1.0).contains(&cfg.eps_low) || !(0.0..=1.0).contains(&cfg.eps_high) {
        return Err(Error::Config(format!(
            "size-band factors must lie in [0, 1]: eps_low = {}, eps_high = {}",
            cfg.eps_low, cfg.eps_high
        )));
    }
    if cfg.eps_low > cfg.eps_high {
        return Err(Error::Config(format!(
            "eps_low > eps_high ({} > {})",
            cfg.eps_low, cfg.eps_high
        )));
    }
    if !cfg.barrier_t0.is_finite() || cfg.barrier_t0 <= 0.0 {
        return Err(Error::Config(format!("barrier_t0 must be > 0, got {}", cfg.barrier_t0)));
    }
    if !cfg.barrier_factor.is_finite() || cfg.barrier_factor < 1.0 {
        return Err(Error::Config(format!(
            "barrier_factor must be >= 1, got {}",
            cfg.barrier_factor
        )));
    }
    if cfg.barrier_every == 0 {
        return Err(Error::Config("barrier_every must be >= 1".into()));
    }
    if !cfg.lr.is_finite() || cfg.lr <= 0.0 {
        return Err(Error::Config(format!("lr must be > 0, got {}", cfg.lr)));
    }
    if !cfg.weight_decay.is_finite() || cfg.weight_decay < 0.0 {
        return Err(Error::Config(format!("weight_decay must be >= 0, got {}", cfg.weight_decay)));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    if let Some(drop) = cfg.lr_drop_epoch {
        if drop > cfg.epochs {
            return Err(Error::Config(format!(
                "lr_drop_epoch {} exceeds epochs {}",
                drop, cfg.epochs
            )));
        }
    }
    if cfg.lambda_cons > 0.0 && cfg.transforms.is_empty() {
        return Err(Error::Config(
            "lambda_cons > 0 requires a non-empty transform pool".into(),
        ));
    }
    Ok(())
}
