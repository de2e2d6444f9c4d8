//! Weakly supervised segmentation from box prompts.
//!
//! This crate trains a small convolutional mask generator from bounding-box
//! annotations alone. A frozen promptable backbone turns each box into a
//! pseudo-label mask once, up front; the generator is then fit against those
//! pseudo-labels together with three box-derived regularizers:
//!
//! * a **size constraint** keeping predicted foreground mass inside a band
//!   proportional to the box area,
//! * an **emptiness constraint** pushing probability to zero outside the box,
//! * a **consistency term** tying predictions on transformed inputs to
//!   transformed predictions.
//!
//! The crate is organized by pipeline stage: [`domain`] holds the validated
//! core types, [`backbone`] the frozen encoder/decoder abstraction and its
//! embedding cache, [`geometry`] box and transform plumbing, [`losses`] the
//! four training terms, [`generator`] the trainable network with hand-written
//! backward passes, [`trainer`] the optimization loop and trial runner, and
//! [`metrics`] the evaluation side (Dice overlap and symmetric surface
//! distance). Everything is deterministic given a seed: random draws come
//! from named substreams, tensor math is f64 in memory, and on-disk formats
//! are little-endian f32 with checksums.

pub mod backbone;
pub mod datapipe;
pub mod domain;
pub mod error;
pub mod experiment;
pub mod generator;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod presets;
pub mod report;
pub mod trainer;
pub mod util;

pub use domain::{
    BinaryMask, BoxAnnotation, EmbeddingTensor, Image, ProbabilityMap, PromptEmbedding,
    RegionPartition, Sample, TrainConfig,
};
pub use error::{Error, Result};
