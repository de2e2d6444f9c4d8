//! The training loop: batches, schedules, gradients and the trial runner.
//!
//! Training never touches backbone weights — the backbone only decodes the
//! generator's dense prompt and supplies cached embeddings and fixed
//! pseudo-labels. Each step backpropagates the weighted loss gradient through
//! the frozen decoder into the generator, averages over the batch, and takes
//! one AdamW step. Two schedules run over epochs: the constraint weight `t`
//! grows geometrically, and the learning rate drops once by 10x.
//!
//! Determinism: every random choice (epoch shuffling, transform sampling,
//! subset selection) draws from a named substream of the config seed, so a
//! run is reproducible bit-for-bit given the same inputs.

use std::path::PathBuf;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneDescriptor, EmbeddingCache};
use crate::domain::{
    BinaryMask, EmbeddingTensor, ProbabilityMap, PromptEmbedding, RegionPartition, Sample,
    TrainConfig,
};
use crate::domain::validate_config;
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::geometry::{
    apply_transform, largest_component_filter, region_partition, sample_transform,
};
use crate::losses::{
    barrier_schedule, consistency_loss_grad, emptiness_loss_grad, pseudo_label_loss_grad,
    size_loss_grad, LossBreakdown,
};
use crate::metrics::{aggregate, assd, dsc, Aggregate, EmptyEmptyPolicy, StdMode};
use crate::optim::AdamW;
use crate::util::named_stream;

/// Where image embeddings come from during training and evaluation.
#[derive(Debug, Clone)]
pub enum EmbeddingSource {
    /// Encode every image through the backbone each time.
    Fresh,
    /// Read from (and populate) an on-disk cache rooted here.
    CacheDir(PathBuf),
}

/// Validation-gate threshold: mean predicted-foreground-to-box-area ratio
/// must exceed this for a trained model to count as usable.
pub const GATE_RATIO_THRESHOLD: f64 = 0.5;

/// Pick a generator architecture matching a backbone's geometry: the
/// production scale gets the deep stride-2 stack, everything smaller gets a
/// compact three-block encoder.
pub fn generator_config_for(desc: &BackboneDescriptor) -> GeneratorConfig {
    if desc.input_size.0 >= 512 {
        GeneratorConfig {
            input_size: desc.input_size,
            embedding_channels: desc.embedding_channels,
            embedding_size: desc.embedding_size,
            encoder_widths: vec![64, 128, 256, 512, 1024, 1024],
            upsample_blocks: 2,
        }
    } else {
        GeneratorConfig {
            input_size: desc.input_size,
            embedding_channels: desc.embedding_channels,
            embedding_size: desc.embedding_size,
            encoder_widths: vec![8, 16, 32],
            upsample_blocks: 2,
        }
    }
}

/// Per-sample state fixed for the whole run: the cached embedding, the
/// box-prompted pseudo-label, and the inside/outside partition.
struct Prepared {
    z: EmbeddingTensor,
    pseudo: BinaryMask,
    partition: RegionPartition,
}

fn prepare_samples(
    backbone: &dyn Backbone,
    samples: &[Sample],
    source: &EmbeddingSource,
) -> Result<Vec<Prepared>> {
    let mut cache = match source {
        EmbeddingSource::Fresh => None,
        EmbeddingSource::CacheDir(root) => {
            Some(EmbeddingCache::open(root, &backbone.descriptor().name)?)
        }
    };
    samples
        .iter()
        .map(|s| {
            s.validate()?;
            let (h, w) = s.image.size();
            let z = match &mut cache {
                Some(c) => c.get_or_compute(backbone, &s.id, &s.image)?.0,
                None => backbone.encode_image(&s.image)?,
            };
            let pseudo = backbone.prompted_pseudo_label(&s.image, &s.box_annotation)?;
            let partition = region_partition(&s.box_annotation, h, w)?;
            Ok(Prepared { z, pseudo, partition })
        })
        .collect()
}

/// Run the generator and frozen decoder on one image whose embedding is
/// already known.
pub fn predict_with_embedding(
    backbone: &dyn Backbone,
    generator: &Generator,
    image: &crate::domain::Image,
    z: &EmbeddingTensor,
) -> Result<ProbabilityMap> {
    let (dense, _) = generator.forward(image)?;
    let prompt = PromptEmbedding { dense, sparse: backbone.default_sparse_embedding() };
    backbone.decode(z, &prompt)
}

/// Encode and predict in one go (no cache).
pub fn predict(
    backbone: &dyn Backbone,
    generator: &Generator,
    image: &crate::domain::Image,
) -> Result<ProbabilityMap> {
    let z = backbone.encode_image(image)?;
    predict_with_embedding(backbone, generator, image, &z)
}

/// One training epoch's telemetry. Loss components are per-sample means and
/// unweighted; `total` is the λ-weighted objective.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub barrier_t: f64,
    pub lr: f64,
    pub mean_grad_norm: f64,
    /// Mean validation Dice (percent), when a validation set was supplied.
    pub val_dsc: Option<f64>,
}

/// What [`train`] hands back: the fitted generator, per-epoch logs, and the
/// backbone checksums that prove the backbone stayed frozen.
pub struct TrainOutcome {
    pub generator: Generator,
    pub log: Vec<EpochLog>,
    pub backbone_checksum_before: u64,
    pub backbone_checksum_after: u64,
}

/// Fit a fresh generator on `samples`. `val` may be empty; when present, its
/// mean Dice is logged per epoch (reference masks required).
pub fn train(
    backbone: &dyn Backbone,
    samples: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    source: &EmbeddingSource,
) -> Result<TrainOutcome> {
    validate_config(cfg)?;
    if samples.is_empty() {
        return Err(Error::Config("no training samples".into()));
    }
    let desc = backbone.descriptor();
    for s in samples.iter().chain(val) {
        if s.image.size() != desc.input_size {
            return Err(Error::Shape(format!(
                "sample '{}' is {:?} but the backbone expects {:?}",
                s.id,
                s.image.size(),
                desc.input_size
            )));
        }
    }

    let checksum_before = backbone.parameter_checksum();
    let prepared = prepare_samples(backbone, samples, source)?;
    let val_prepared = prepare_samples(backbone, val, source)?;
    let mut generator = Generator::new(generator_config_for(desc), cfg.seed)?;
    let mut opt = AdamW::new(generator.parameter_count(), cfg.lr, cfg.weight_decay);
    let mut shuffle_rng = named_stream(cfg.seed, "train/shuffle");
    let mut transform_rng = named_stream(cfg.seed, "train/transforms");
    let use_consistency = cfg.lambda_cons > 0.0 && !cfg.transforms.is_empty();
    let batch_size = cfg.batch_size.max(1);

    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let t = barrier_schedule(epoch, cfg.barrier_t0, cfg.barrier_factor, cfg.barrier_every);
        let lr = if epoch >= cfg.lr_drop_at() { cfg.lr * 0.1 } else { cfg.lr };
        opt.set_lr(lr);

        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = LossBreakdown::zero();
        let mut grad_norm_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch_size) {
            let (mut bd, grad_norm) = train_step(
                backbone,
                &mut generator,
                &mut opt,
                samples,
                &prepared,
                chunk,
                cfg,
                t,
                use_consistency,
                &mut transform_rng,
            )?;
            bd.scale(chunk.len() as f64);
            epoch_loss.add(&bd);
            grad_norm_sum += grad_norm;
            batches += 1;
        }
        epoch_loss.scale(1.0 / samples.len() as f64);

        let val_dsc = if val.is_empty() {
            None
        } else {
            Some(mean_val_dsc(backbone, &generator, val, &val_prepared)?)
        };
        log.push(EpochLog {
            epoch,
            loss: epoch_loss,
            barrier_t: t,
            lr,
            mean_grad_norm: grad_norm_sum / batches.max(1) as f64,
            val_dsc,
        });
    }

    Ok(TrainOutcome {
        generator,
        log,
        backbone_checksum_before: checksum_before,
        backbone_checksum_after: backbone.parameter_checksum(),
    })
}

/// One batch: accumulate per-sample gradients, average, and step.
#[allow(clippy::too_many_arguments)]
fn train_step(
    backbone: &dyn Backbone,
    generator: &mut Generator,
    opt: &mut AdamW,
    samples: &[Sample],
    prepared: &[Prepared],
    batch: &[usize],
    cfg: &TrainConfig,
    t: f64,
    use_consistency: bool,
    transform_rng: &mut impl rand::Rng,
) -> Result<(LossBreakdown, f64)> {
    let sparse = backbone.default_sparse_embedding();
    let mut grads = vec![0.0f64; generator.parameter_count()];
    let mut batch_loss = LossBreakdown::zero();

    for &i in batch {
        let s = &samples[i];
        let p = &prepared[i];

        let (dense, trace) = generator.forward(&s.image)?;
        let prompt = PromptEmbedding { dense, sparse: sparse.clone() };
        let pred = backbone.decode(&p.z, &prompt)?;

        let (l_pseudo, g_pseudo) =
            pseudo_label_loss_grad(&pred, &p.pseudo, cfg.alpha, cfg.beta)?;
        let (l_size, g_size) =
            size_loss_grad(&pred, &p.partition, cfg.eps_low, cfg.eps_high, cfg.penalty, t)?;
        let (l_empty, g_empty) = emptiness_loss_grad(&pred, &p.partition)?;

        let mut upstream: Array2<f64> = &g_pseudo * cfg.lambda_pseudo;
        upstream.scaled_add(cfg.lambda_size, &g_size);
        upstream.scaled_add(cfg.lambda_empty, &g_empty);
        let grad_dense = backbone.decode_grad_dense(&p.z, &prompt, &upstream)?;
        for (g, v) in grads.iter_mut().zip(generator.backward(&trace, &grad_dense)) {
            *g += v;
        }

        let l_cons = if use_consistency {
            let tf = sample_transform(&cfg.transforms, transform_rng);
            let t_image = apply_transform(&tf, &s.image)?;
            let t_z = apply_transform(&tf, &p.z)?;
            let (dense_t, trace_t) = generator.forward(&t_image)?;
            let prompt_t = PromptEmbedding { dense: dense_t, sparse: sparse.clone() };
            let student = backbone.decode(&t_z, &prompt_t)?;
            // The target branch is a constant: the transform of the clean
            // prediction, with no gradient flowing back through it.
            let target = apply_transform(&tf, &pred)?;
            let (l, g_student) = consistency_loss_grad(&student, &target)?;
            let grad_dense_t =
                backbone.decode_grad_dense(&t_z, &prompt_t, &(&g_student * cfg.lambda_cons))?;
            for (g, v) in grads.iter_mut().zip(generator.backward(&trace_t, &grad_dense_t)) {
                *g += v;
            }
            l
        } else {
            0.0
        };

        let total = cfg.lambda_pseudo * l_pseudo
            + cfg.lambda_size * l_size
            + cfg.lambda_empty * l_empty
            + cfg.lambda_cons * l_cons;
        batch_loss.add(&LossBreakdown {
            pseudo: l_pseudo,
            size: l_size,
            empty: l_empty,
            cons: l_cons,
            total,
        });
    }

    let inv = 1.0 / batch.len() as f64;
    for g in &mut grads {
        *g *= inv;
    }
    batch_loss.scale(inv);
    let grad_norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if !batch_loss.is_finite() || !grad_norm.is_finite() {
        return Err(Error::NonFinite(format!(
            "training diverged: loss {batch_loss:?}, grad norm {grad_norm}"
        )));
    }
    opt.step(generator.params_mut(), &grads);
    Ok((batch_loss, grad_norm))
}

fn mean_val_dsc(
    backbone: &dyn Backbone,
    generator: &Generator,
    val: &[Sample],
    prepared: &[Prepared],
) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (s, p) in val.iter().zip(prepared) {
        let Some(reference) = &s.reference_mask else {
            continue;
        };
        let pred = predict_with_embedding(backbone, generator, &s.image, &p.z)?;
        let mask = largest_component_filter(&pred.threshold(0.5), 0);
        sum += dsc(&mask, reference)?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Config("validation set has no reference masks".into()));
    }
    Ok(sum / n as f64)
}

/// Inference-time post-processing and metric conventions.
#[derive(Debug, Clone)]
pub struct EvalOptions {
    /// Probability cut for the binary mask.
    pub threshold: f64,
    /// Components below this size are dropped even if largest (0 keeps the
    /// largest component unconditionally).
    pub min_component: usize,
    pub empty_empty: EmptyEmptyPolicy,
    pub std_mode: StdMode,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            min_component: 0,
            empty_empty: EmptyEmptyPolicy::default(),
            std_mode: StdMode::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SampleEval {
    pub id: String,
    pub dsc: f64,
    pub assd: f64,
}

#[derive(Debug, Clone)]
pub struct EvalSummary {
    pub per_sample: Vec<SampleEval>,
    pub dsc: Aggregate,
    pub assd: Aggregate,
}

/// Predict every sample, post-process (threshold then largest-component
/// filter), and score against the reference masks.
pub fn evaluate(
    backbone: &dyn Backbone,
    generator: &Generator,
    samples: &[Sample],
    source: &EmbeddingSource,
    opts: &EvalOptions,
) -> Result<EvalSummary> {
    if samples.is_empty() {
        return Err(Error::Config("nothing to evaluate".into()));
    }
    let prepared = prepare_samples(backbone, samples, source)?;
    let mut per_sample = Vec::with_capacity(samples.len());
    for (s, p) in samples.iter().zip(&prepared) {
        let reference = s.reference_mask.as_ref().ok_or_else(|| {
            Error::Config(format!("sample '{}' has no reference mask to score against", s.id))
        })?;
        let pred = predict_with_embedding(backbone, generator, &s.image, &p.z)?;
        let mask = largest_component_filter(&pred.threshold(opts.threshold), opts.min_component);
        per_sample.push(SampleEval {
            id: s.id.clone(),
            dsc: dsc(&mask, reference)?,
            assd: assd(&mask, reference, opts.empty_empty)?,
        });
    }
    let dscs: Vec<f64> = per_sample.iter().map(|e| e.dsc).collect();
    let assds: Vec<f64> = per_sample.iter().map(|e| e.assd).collect();
    Ok(EvalSummary {
        per_sample,
        dsc: aggregate(&dscs, opts.std_mode)?,
        assd: aggregate(&assds, opts.std_mode)?,
    })
}

/// Result of the no-reference validation gate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GateReport {
    /// Mean over samples of predicted-foreground count / box area.
    pub mean_ratio: f64,
    pub threshold: f64,
    pub pass: bool,
}

/// Label-free sanity check on a trained model: a prediction that collapsed
/// to (near-)empty fills far less than half of its box. No reference masks
/// are needed, so this can run on the training inputs themselves.
pub fn validation_gate(
    backbone: &dyn Backbone,
    generator: &Generator,
    samples: &[Sample],
    source: &EmbeddingSource,
) -> Result<GateReport> {
    if samples.is_empty() {
        return Err(Error::Config("validation gate needs at least one sample".into()));
    }
    let prepared = prepare_samples(backbone, samples, source)?;
    let mut sum = 0.0;
    for (s, p) in samples.iter().zip(&prepared) {
        let pred = predict_with_embedding(backbone, generator, &s.image, &p.z)?;
        let fg = pred.threshold(0.5).count_foreground() as f64;
        sum += fg / s.box_annotation.area() as f64;
    }
    let mean_ratio = sum / samples.len() as f64;
    Ok(GateReport {
        mean_ratio,
        threshold: GATE_RATIO_THRESHOLD,
        pass: mean_ratio > GATE_RATIO_THRESHOLD,
    })
}

/// One (subset seed, training seed) cell of the trial grid.
#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub subset_seed: u64,
    pub train_seed: u64,
    /// Mean test Dice (percent) for this trial.
    pub dsc: f64,
    /// Mean test surface distance for this trial.
    pub assd: f64,
    pub gate: GateReport,
}

#[derive(Debug, Clone)]
pub struct TrialReport {
    pub trials: Vec<TrialOutcome>,
    /// Aggregate of the per-trial mean Dice values.
    pub dsc: Aggregate,
    /// Aggregate of the per-trial mean surface distances.
    pub assd: Aggregate,
}

/// Run the full trial grid: for every subset seed draw a training subset
/// from `pool`, train once per training seed, and score on `test`. The
/// aggregates are over trials (not pooled samples), matching how few-shot
/// results are usually reported.
pub fn run_trials(
    backbone: &dyn Backbone,
    pool: &[Sample],
    test: &[Sample],
    cfg: &TrainConfig,
    subset_seeds: &[u64],
    train_seeds: &[u64],
    source: &EmbeddingSource,
) -> Result<TrialReport> {
    if subset_seeds.is_empty() || train_seeds.is_empty() {
        return Err(Error::Config("trial grid needs at least one seed per axis".into()));
    }
    let mut trials = Vec::with_capacity(subset_seeds.len() * train_seeds.len());
    for &subset_seed in subset_seeds {
        let subset = draw_subset(pool, cfg.subset_size, subset_seed);
        for &train_seed in train_seeds {
            let mut trial_cfg = cfg.clone();
            trial_cfg.seed = train_seed;
            let outcome = train(backbone, &subset, &[], &trial_cfg, source)?;
            let gate = validation_gate(backbone, &outcome.generator, &subset, source)?;
            let summary =
                evaluate(backbone, &outcome.generator, test, source, &EvalOptions::default())?;
            trials.push(TrialOutcome {
                subset_seed,
                train_seed,
                dsc: summary.dsc.mean,
                assd: summary.assd.mean,
                gate,
            });
        }
    }
    let dscs: Vec<f64> = trials.iter().map(|t| t.dsc).collect();
    let assds: Vec<f64> = trials.iter().map(|t| t.assd).collect();
    Ok(TrialReport {
        trials,
        dsc: aggregate(&dscs, StdMode::Sample)?,
        assd: aggregate(&assds, StdMode::Sample)?,
    })
}

/// Draw `k` distinct samples from the pool (all of them when `k` is 0 or
/// exceeds the pool), deterministically in the subset seed.
fn draw_subset(pool: &[Sample], k: usize, subset_seed: u64) -> Vec<Sample> {
    if k == 0 || k >= pool.len() {
        return pool.to_vec();
    }
    let mut rng = named_stream(subset_seed, "trials/subset");
    let mut chosen = rand::seq::index::sample(&mut rng, pool.len(), k).into_vec();
    chosen.sort_unstable();
    chosen.into_iter().map(|i| pool[i].clone()).collect()
}
