//! Controlled studies on top of the trainer: which loss terms earn their
//! keep, and how training degrades when the annotated boxes are sloppy.
//!
//! Both runners reuse [`run_trials`] unchanged, so every number they report
//! carries the same subset/seed protocol as the headline results; only one
//! factor (the loss configuration, or the box noise band) varies at a time.

use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::domain::{Sample, TrainConfig};
use crate::error::Result;
use crate::geometry::perturb_box;
use crate::trainer::{run_trials, EmbeddingSource, TrialReport};
use crate::util::named_stream;

// ---------------------------------------------------------------------------
// Loss ablations

/// Which loss terms stay active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationMode {
    /// All four terms at their configured weights.
    Full,
    /// Pseudo-label supervision alone — size, emptiness and consistency off.
    PseudoOnly,
    /// Everything except the transform-consistency term.
    NoConsistency,
}

impl AblationMode {
    pub const ALL: [Self; 3] = [Self::Full, Self::PseudoOnly, Self::NoConsistency];

    pub fn label(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::PseudoOnly => "pseudo-only",
            Self::NoConsistency => "no-consistency",
        }
    }
}

/// Zero out the weights the mode disables; everything else (schedules,
/// seeds, optimizer) is untouched so runs stay comparable.
pub fn apply_ablation(cfg: &TrainConfig, mode: AblationMode) -> TrainConfig {
    let mut out = cfg.clone();
    match mode {
        AblationMode::Full => {}
        AblationMode::PseudoOnly => {
            out.lambda_size = 0.0;
            out.lambda_empty = 0.0;
            out.lambda_cons = 0.0;
        }
        AblationMode::NoConsistency => out.lambda_cons = 0.0,
    }
    out
}

#[derive(Debug, Clone)]
pub struct AblationResult {
    pub mode: AblationMode,
    pub report: TrialReport,
}

/// Run the trial grid once per ablation mode.
#[allow(clippy::too_many_arguments)]
pub fn run_loss_ablation(
    backbone: &dyn Backbone,
    pool: &[Sample],
    test: &[Sample],
    cfg: &TrainConfig,
    subset_seeds: &[u64],
    train_seeds: &[u64],
    source: &EmbeddingSource,
) -> Result<Vec<AblationResult>> {
    AblationMode::ALL
        .iter()
        .map(|&mode| {
            let cfg = apply_ablation(cfg, mode);
            let report =
                run_trials(backbone, pool, test, &cfg, subset_seeds, train_seeds, source)?;
            Ok(AblationResult { mode, report })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Box-noise robustness

/// One annotation-noise band. Boundary displacements are drawn from
/// `[lo, hi]` as fractions of `sqrt(h * w)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseBand {
    pub lo: f64,
    pub hi: f64,
}

impl NoiseBand {
    /// Display label, kept free of commas so it can sit in a CSV cell.
    pub fn label(self) -> String {
        if self.hi == 0.0 {
            "clean".to_string()
        } else {
            format!("({:.1}-{:.1}]%", self.lo * 100.0, self.hi * 100.0)
        }
    }
}

/// The studied bands: clean boxes, then displacement magnitudes up to 1.5%,
/// 3% and 5% of the image's diagonal length scale.
pub const NOISE_BANDS: [NoiseBand; 4] = [
    NoiseBand { lo: 0.0, hi: 0.0 },
    NoiseBand { lo: 0.0, hi: 0.015 },
    NoiseBand { lo: 0.015, hi: 0.03 },
    NoiseBand { lo: 0.03, hi: 0.05 },
];

/// Replace each sample's box with a perturbed one. Images and reference
/// masks are untouched — scoring stays against clean references; only the
/// supervision signal degrades. The clean band returns the samples as-is.
pub fn perturb_training_boxes(
    samples: &[Sample],
    band: NoiseBand,
    seed: u64,
) -> Result<Vec<Sample>> {
    if band.hi == 0.0 {
        return Ok(samples.to_vec());
    }
    let mut rng = named_stream(seed, "noise/boxes");
    samples
        .iter()
        .map(|s| {
            let (h, w) = s.image.size();
            let perturbed = perturb_box(&s.box_annotation, h, w, band.lo, band.hi, &mut rng)?;
            Ok(Sample { box_annotation: perturbed, ..s.clone() })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct NoiseResult {
    pub band: NoiseBand,
    pub report: TrialReport,
}

/// Run the trial grid once per noise band, training on perturbed boxes and
/// scoring on the untouched test set. [`NOISE_BANDS`] is the usual band list.
#[allow(clippy::too_many_arguments)]
pub fn run_noise_ablation(
    backbone: &dyn Backbone,
    pool: &[Sample],
    test: &[Sample],
    cfg: &TrainConfig,
    bands: &[NoiseBand],
    subset_seeds: &[u64],
    train_seeds: &[u64],
    noise_seed: u64,
    source: &EmbeddingSource,
) -> Result<Vec<NoiseResult>> {
    bands
        .iter()
        .map(|&band| {
            let noisy = perturb_training_boxes(pool, band, noise_seed)?;
            let report =
                run_trials(backbone, &noisy, test, cfg, subset_seeds, train_seeds, source)?;
            Ok(NoiseResult { band, report })
        })
        .collect()
}
