//! The four training losses and their exact gradients with respect to the
//! predicted probability map, plus the constraint penalty pair and the
//! barrier-weight schedule.
//!
//! Conventions, fixed across the crate:
//! - the pseudo-label term is `alpha * CE + beta * Dice` where CE is the
//!   *pixel mean* cross-entropy and Dice is `1 - soft Dice coefficient`
//!   with additive smoothing 1;
//! - the size constraint bounds the *total* predicted mass (sum over all
//!   pixels) to `[eps_low, eps_high] * |Ω_I|`;
//! - the emptiness term is a *sum* over outside-box pixels of `-ln(1 - p)`;
//! - the consistency term is the sum of squared differences between the
//!   student map and the (gradient-blocked) transformed teacher map;
//! - probabilities are clamped to `[1e-7, 1 - 1e-7]` before any logarithm,
//!   and the clamp saturates gradients outside that interval.
//!
//! All gradient functions return `d(loss)/d(pred)` per pixel and are verified
//! against central finite differences by the acceptance suite.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::domain::{BinaryMask, ProbabilityMap, RegionPartition, TrainConfig};
use crate::error::{Error, Result};

/// Probabilities are clamped to `[P_CLAMP, 1 - P_CLAMP]` before logs.
pub const P_CLAMP: f64 = 1e-7;
/// Additive smoothing in the soft Dice coefficient.
pub const DICE_SMOOTH: f64 = 1.0;

/// Which penalty shapes the inequality constraints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyKind {
    /// `max(0, z)`: zero on the feasible side, linear outside.
    Relu,
    /// The extended log-barrier: a scaled `-ln(-z)` barrier on the strictly
    /// feasible side, extended by its tangent line beyond `z = -1/t^2` so it
    /// is defined, continuous and differentiable everywhere. Strictly
    /// feasible points receive *negative* values (they are rewarded), which
    /// is inherent to this construction.
    LogBarrier,
}

impl std::fmt::Display for PenaltyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PenaltyKind::Relu => write!(f, "relu"),
            PenaltyKind::LogBarrier => write!(f, "logbarrier"),
        }
    }
}

/// Penalty value for constraint slack `z` (feasible means `z <= 0`) at
/// barrier weight `t`.
pub fn penalty(kind: PenaltyKind, t: f64, z: f64) -> f64 {
    match kind {
        PenaltyKind::Relu => z.max(0.0),
        PenaltyKind::LogBarrier => {
            let junction = -1.0 / (t * t);
            if z <= junction {
                -(1.0 / t) * (-z).ln()
            } else {
                t * z - (1.0 / t) * (1.0 / (t * t)).ln() + 1.0 / t
            }
        }
    }
}

/// Derivative of [`penalty`] with respect to `z`.
pub fn penalty_grad(kind: PenaltyKind, t: f64, z: f64) -> f64 {
    match kind {
        PenaltyKind::Relu => {
            if z > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        PenaltyKind::LogBarrier => {
            let junction = -1.0 / (t * t);
            if z <= junction {
                -1.0 / (t * z)
            } else {
                t
            }
        }
    }
}

/// Barrier weight at `epoch`: `t0 * factor^(epoch / every)` with integer
/// division, i.e. the weight is raised by `factor` once every `every` epochs.
pub fn barrier_schedule(epoch: usize, t0: f64, factor: f64, every: usize) -> f64 {
    assert!(every >= 1, "barrier_every must be >= 1");
    t0 * factor.powi((epoch / every) as i32)
}

#[inline]
fn clamp_p(p: f64) -> f64 {
    p.clamp(P_CLAMP, 1.0 - P_CLAMP)
}

/// Whether the clamp is inactive at `p`, i.e. gradients pass through.
#[inline]
fn clamp_open(p: f64) -> bool {
    (P_CLAMP..=1.0 - P_CLAMP).contains(&p)
}

fn check_same_shape(a: (usize, usize), b: (usize, usize), what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!(
            "{what}: {}x{} vs {}x{}",
            a.0, a.1, b.0, b.1
        )));
    }
    Ok(())
}

/// Supervision against the frozen backbone's pseudo-label:
/// `alpha * mean-CE(pred, pseudo) + beta * (1 - softDice(pred, pseudo))`.
pub fn pseudo_label_loss(
    pred: &ProbabilityMap,
    pseudo: &BinaryMask,
    alpha: f64,
    beta: f64,
) -> Result<f64> {
    pseudo_label_loss_grad(pred, pseudo, alpha, beta).map(|(l, _)| l)
}

/// [`pseudo_label_loss`] together with its gradient w.r.t. `pred`.
pub fn pseudo_label_loss_grad(
    pred: &ProbabilityMap,
    pseudo: &BinaryMask,
    alpha: f64,
    beta: f64,
) -> Result<(f64, Array2<f64>)> {
    check_same_shape(pred.size(), pseudo.size(), "pred vs pseudo-label")?;
    let (h, w) = pred.size();
    let n = (h * w) as f64;

    let mut ce = 0.0;
    let mut sum_p = 0.0;
    let mut sum_y = 0.0;
    let mut sum_py = 0.0;
    for ((yx, &p), &y) in pred
        .values()
        .indexed_iter()
        .zip(pseudo.values().iter())
    {
        let _ = yx;
        let y = y as f64;
        let pc = clamp_p(p);
        ce -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
        sum_p += p;
        sum_y += y;
        sum_py += p * y;
    }
    ce /= n;
    let dice_num = 2.0 * sum_py + DICE_SMOOTH;
    let dice_den = sum_p + sum_y + DICE_SMOOTH;
    let dice_loss = 1.0 - dice_num / dice_den;
    let loss = alpha * ce + beta * dice_loss;

    let mut grad = Array2::<f64>::zeros((h, w));
    for ((idx, &p), &y) in pred
        .values()
        .indexed_iter()
        .zip(pseudo.values().iter())
    {
        let y = y as f64;
        let mut g = 0.0;
        if clamp_open(p) {
            let pc = clamp_p(p);
            g += alpha * (-y / pc + (1.0 - y) / (1.0 - pc)) / n;
        }
        // d(1 - num/den)/dp  =  (num - 2 y den) / den^2.
        g += beta * (dice_num - 2.0 * y * dice_den) / (dice_den * dice_den);
        grad[idx] = g;
    }
    Ok((loss, grad))
}

/// Size constraint on the total predicted mass: with `S = Σ pred` over all
/// pixels and `A = |Ω_I|`, penalizes `eps_low * A - S <= 0` and
/// `S - eps_high * A <= 0` through the configured penalty at weight `t`.
pub fn size_loss(
    pred: &ProbabilityMap,
    partition: &RegionPartition,
    eps_low: f64,
    eps_high: f64,
    kind: PenaltyKind,
    t: f64,
) -> Result<f64> {
    size_loss_grad(pred, partition, eps_low, eps_high, kind, t).map(|(l, _)| l)
}

/// [`size_loss`] together with its gradient w.r.t. `pred` (constant across
/// pixels, since only the total mass enters).
pub fn size_loss_grad(
    pred: &ProbabilityMap,
    partition: &RegionPartition,
    eps_low: f64,
    eps_high: f64,
    kind: PenaltyKind,
    t: f64,
) -> Result<(f64, Array2<f64>)> {
    check_same_shape(pred.size(), partition.size(), "pred vs partition")?;
    let s = pred.mass();
    let a = partition.inside_count() as f64;
    let z_low = eps_low * a - s;
    let z_high = s - eps_high * a;
    let loss = penalty(kind, t, z_low) + penalty(kind, t, z_high);
    let g = -penalty_grad(kind, t, z_low) + penalty_grad(kind, t, z_high);
    let (h, w) = pred.size();
    Ok((loss, Array2::from_elem((h, w), g)))
}

/// Emptiness constraint: `Σ_{(y,x) ∈ Ω_O} -ln(1 - pred)`, a sum (not a mean)
/// over the known-background pixels.
pub fn emptiness_loss(pred: &ProbabilityMap, partition: &RegionPartition) -> Result<f64> {
    emptiness_loss_grad(pred, partition).map(|(l, _)| l)
}

/// [`emptiness_loss`] together with its gradient w.r.t. `pred`.
pub fn emptiness_loss_grad(
    pred: &ProbabilityMap,
    partition: &RegionPartition,
) -> Result<(f64, Array2<f64>)> {
    check_same_shape(pred.size(), partition.size(), "pred vs partition")?;
    let (h, w) = pred.size();
    let mut loss = 0.0;
    let mut grad = Array2::<f64>::zeros((h, w));
    // Only the upper side needs a clamp: -ln(1 - p) is exact at p = 0 and
    // singular only at p = 1. Past the clamp the loss is flat, so the
    // gradient gates off there.
    for ((y, x), &p) in pred.values().indexed_iter() {
        if !partition.is_inside(y, x) {
            let pc = p.min(1.0 - P_CLAMP);
            loss -= (1.0 - pc).ln();
            if p < 1.0 - P_CLAMP {
                grad[[y, x]] = 1.0 / (1.0 - pc);
            }
        }
    }
    Ok((loss, grad))
}

/// Transform-consistency term: squared L2 distance between the prediction on
/// the transformed input (`student`) and the transformed prediction
/// (`target`), summed over pixels.
///
/// The target branch is treated as a constant: no gradient flows through it,
/// which is why only a student gradient is returned.
pub fn consistency_loss(student: &ProbabilityMap, target: &ProbabilityMap) -> Result<f64> {
    consistency_loss_grad(student, target).map(|(l, _)| l)
}

/// [`consistency_loss`] together with its gradient w.r.t. `student`.
pub fn consistency_loss_grad(
    student: &ProbabilityMap,
    target: &ProbabilityMap,
) -> Result<(f64, Array2<f64>)> {
    check_same_shape(student.size(), target.size(), "student vs target")?;
    let mut loss = 0.0;
    let mut grad = Array2::<f64>::zeros(student.size());
    for ((idx, &s), &t) in student
        .values()
        .indexed_iter()
        .zip(target.values().iter())
    {
        let d = s - t;
        loss += d * d;
        grad[idx] = 2.0 * d;
    }
    Ok((loss, grad))
}

/// Per-term record of one total-loss evaluation. Component values are stored
/// *unweighted*; `total` is the λ-weighted combination.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub pseudo: f64,
    pub size: f64,
    pub empty: f64,
    pub cons: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn zero() -> Self {
        Self { pseudo: 0.0, size: 0.0, empty: 0.0, cons: 0.0, total: 0.0 }
    }

    pub fn is_finite(&self) -> bool {
        self.pseudo.is_finite()
            && self.size.is_finite()
            && self.empty.is_finite()
            && self.cons.is_finite()
            && self.total.is_finite()
    }

    /// Element-wise accumulation (for epoch averages).
    pub fn add(&mut self, other: &LossBreakdown) {
        self.pseudo += other.pseudo;
        self.size += other.size;
        self.empty += other.empty;
        self.cons += other.cons;
        self.total += other.total;
    }

    pub fn scale(&mut self, f: f64) {
        self.pseudo *= f;
        self.size *= f;
        self.empty *= f;
        self.cons *= f;
        self.total *= f;
    }
}

/// The full training objective:
/// `λ_pseudo * pseudo + λ_size * size + λ_empty * empty + λ_cons * cons`,
/// with the per-term breakdown retained.
///
/// `consistency` carries the (student, target) pair when the consistency term
/// is active; pass `None` to skip it (its component is reported as 0).
pub fn total_loss(
    pred: &ProbabilityMap,
    pseudo: &BinaryMask,
    partition: &RegionPartition,
    consistency: Option<(&ProbabilityMap, &ProbabilityMap)>,
    cfg: &TrainConfig,
    t: f64,
) -> Result<LossBreakdown> {
    let pseudo_term = pseudo_label_loss(pred, pseudo, cfg.alpha, cfg.beta)?;
    let size_term = size_loss(pred, partition, cfg.eps_low, cfg.eps_high, cfg.penalty, t)?;
    let empty_term = emptiness_loss(pred, partition)?;
    let cons_term = match consistency {
        Some((student, target)) => consistency_loss(student, target)?,
        None => 0.0,
    };
    let total = cfg.lambda_pseudo * pseudo_term
        + cfg.lambda_size * size_term
        + cfg.lambda_empty * empty_term
        + cfg.lambda_cons * cons_term;
    Ok(LossBreakdown {
        pseudo: pseudo_term,
        size: size_term,
        empty: empty_term,
        cons: cons_term,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::BoxAnnotation;
    use crate::geometry::region_partition;
    use crate::gradcheck::{central_diff_grad, max_relative_error};
    use crate::util::named_stream;
    use ndarray::array;
    use rand::Rng;

    fn prob(values: Array2<f64>) -> ProbabilityMap {
        ProbabilityMap::new(values).unwrap()
    }

    fn random_prob(h: usize, w: usize, rng: &mut impl Rng) -> ProbabilityMap {
        // Away from the clamp boundaries so finite differences stay valid.
        prob(Array2::from_shape_fn((h, w), |_| rng.gen_range(0.05..0.95)))
    }

    fn random_mask(h: usize, w: usize, rng: &mut impl Rng) -> BinaryMask {
        BinaryMask::new(Array2::from_shape_fn((h, w), |_| u8::from(rng.gen_bool(0.5)))).unwrap()
    }

    // ---- pseudo-label term ----

    #[test]
    fn perfect_prediction_has_near_zero_pseudo_loss() {
        let y = BinaryMask::new(array![[1u8, 0], [0, 1]]).unwrap();
        let p = prob(array![[1.0, 0.0], [0.0, 1.0]]);
        let l = pseudo_label_loss(&p, &y, 1.0, 1.0).unwrap();
        // CE is bounded by the clamp (~1e-7 per pixel); Dice is exactly 0.
        assert!(l >= 0.0 && l < 1e-6, "loss = {l}");
    }

    #[test]
    fn uniform_half_prediction_matches_hand_computation() {
        // 2x2, two foreground pixels, all predictions 0.5:
        // CE = ln 2; Dice coeff = (2*1 + 1)/(2 + 2 + 1) = 0.6, loss 0.4.
        let y = BinaryMask::new(array![[1u8, 1], [0, 0]]).unwrap();
        let p = prob(Array2::from_elem((2, 2), 0.5));
        let l = pseudo_label_loss(&p, &y, 1.0, 1.0).unwrap();
        let expect = std::f64::consts::LN_2 + 0.4;
        assert!((l - expect).abs() < 1e-12, "{l} vs {expect}");
    }

    #[test]
    fn alpha_beta_weights_scale_their_terms() {
        let y = BinaryMask::new(array![[1u8, 1], [0, 0]]).unwrap();
        let p = prob(Array2::from_elem((2, 2), 0.5));
        let ce_only = pseudo_label_loss(&p, &y, 1.0, 0.0).unwrap();
        let dice_only = pseudo_label_loss(&p, &y, 0.0, 1.0).unwrap();
        assert!((ce_only - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((dice_only - 0.4).abs() < 1e-12);
        let both = pseudo_label_loss(&p, &y, 2.0, 3.0).unwrap();
        assert!((both - (2.0 * ce_only + 3.0 * dice_only)).abs() < 1e-12);
    }

    #[test]
    fn pseudo_loss_gradient_matches_finite_differences() {
        let mut rng = named_stream(21, "loss");
        for _ in 0..5 {
            let p = random_prob(4, 4, &mut rng);
            let y = random_mask(4, 4, &mut rng);
            let (_, g) = pseudo_label_loss_grad(&p, &y, 1.0, 1.0).unwrap();
            let num = central_diff_grad(
                |v| pseudo_label_loss(&prob(v.clone()), &y, 1.0, 1.0).unwrap(),
                p.values(),
                1e-6,
            );
            assert!(max_relative_error(&g, &num, 1e-6) < 1e-5);
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let y = BinaryMask::zeros(2, 3);
        let p = prob(Array2::from_elem((2, 2), 0.5));
        assert!(matches!(pseudo_label_loss(&p, &y, 1.0, 1.0), Err(Error::Shape(_))));
    }

    // ---- penalty and schedule ----

    #[test]
    fn relu_penalty_worked_examples() {
        assert_eq!(penalty(PenaltyKind::Relu, 5.0, -3.0), 0.0);
        assert_eq!(penalty(PenaltyKind::Relu, 5.0, 2.0), 2.0);
        assert_eq!(penalty(PenaltyKind::Relu, 5.0, 0.0), 0.0);
    }

    #[test]
    fn logbarrier_worked_examples() {
        // At z = -1 (log branch since -1 <= -1/25): -(1/5) ln 1 = 0.
        assert_eq!(penalty(PenaltyKind::LogBarrier, 5.0, -1.0), 0.0);
        // At z = 0 (linear branch): t*0 - (1/t) ln(1/t^2) + 1/t = (2 ln 5 + 1)/5.
        let expect = (2.0 * 5.0f64.ln() + 1.0) / 5.0;
        assert!((penalty(PenaltyKind::LogBarrier, 5.0, 0.0) - expect).abs() < 1e-12);
    }

    #[test]
    fn logbarrier_is_continuous_and_smooth_at_the_junction() {
        for t in [2.0, 5.0, 50.0] {
            let j = -1.0 / (t * t);
            let eps = 1e-9;
            let left = penalty(PenaltyKind::LogBarrier, t, j - eps);
            let right = penalty(PenaltyKind::LogBarrier, t, j + eps);
            let at = penalty(PenaltyKind::LogBarrier, t, j);
            // The function is continuous with slope t at the junction, so a
            // step of eps moves the value by about t * eps.
            assert!((left - at).abs() < 2.0 * t * eps, "t={t}: left {left} vs {at}");
            assert!((right - at).abs() < 2.0 * t * eps, "t={t}: right {right} vs {at}");
            // One-sided slopes agree with the analytic derivative t.
            let slope_left = (at - penalty(PenaltyKind::LogBarrier, t, j - 1e-6)) / 1e-6;
            let slope_right = (penalty(PenaltyKind::LogBarrier, t, j + 1e-6) - at) / 1e-6;
            assert!((slope_left - t).abs() < 1e-2 * t.max(1.0));
            assert!((slope_right - t).abs() < 1e-6 * t.max(1.0));
            assert!((penalty_grad(PenaltyKind::LogBarrier, t, j) - t).abs() < 1e-9);
        }
    }

    #[test]
    fn penalties_are_monotone_nondecreasing() {
        for kind in [PenaltyKind::Relu, PenaltyKind::LogBarrier] {
            for t in [1.0, 5.0, 20.0] {
                let mut prev = f64::NEG_INFINITY;
                let mut z = -50.0;
                while z <= 50.0 {
                    let v = penalty(kind, t, z);
                    assert!(v >= prev - 1e-12, "{kind:?} t={t} not monotone at z={z}");
                    prev = v;
                    z += 0.25;
                }
            }
        }
    }

    #[test]
    fn infeasible_penalty_grows_with_t() {
        // Raising t tightens the constraint: a fixed violation costs more.
        for z in [0.5, 2.0, 10.0] {
            let mut prev = 0.0;
            for t in [2.0, 5.0, 10.0, 50.0] {
                let v = penalty(PenaltyKind::LogBarrier, t, z);
                assert!(v > prev, "z={z}, t={t}");
                prev = v;
            }
        }
    }

    #[test]
    fn penalty_gradients_match_finite_differences() {
        for kind in [PenaltyKind::Relu, PenaltyKind::LogBarrier] {
            for t in [2.0, 5.0, 50.0] {
                // Points stay clear of each t's junction at -1/t^2, where
                // the curvature (~t^3) would swamp the finite difference.
                for z in [-30.0, -2.0, -0.5, -0.01, 0.1, 3.0, 25.0] {
                    let h = 1e-6;
                    let num = (penalty(kind, t, z + h) - penalty(kind, t, z - h)) / (2.0 * h);
                    let ana = penalty_grad(kind, t, z);
                    assert!(
                        (num - ana).abs() <= 1e-4 * ana.abs().max(1.0),
                        "{kind:?} t={t} z={z}: {ana} vs {num}"
                    );
                }
            }
        }
    }

    #[test]
    fn barrier_schedule_steps_every_n_epochs() {
        assert_eq!(barrier_schedule(0, 5.0, 1.1, 5), 5.0);
        assert_eq!(barrier_schedule(4, 5.0, 1.1, 5), 5.0);
        assert_eq!(barrier_schedule(5, 5.0, 1.1, 5), 5.5);
        assert_eq!(barrier_schedule(9, 5.0, 1.1, 5), 5.5);
        assert!((barrier_schedule(10, 5.0, 1.1, 5) - 6.05).abs() < 1e-12);
        // Doubling every epoch (the full-data variant).
        assert_eq!(barrier_schedule(3, 5.0, 2.0, 1), 40.0);
    }

    // ---- size term ----

    #[test]
    fn size_loss_relu_is_zero_exactly_inside_the_band() {
        let b = BoxAnnotation::new(1, 1, 4, 4).unwrap(); // area 16
        let part = region_partition(&b, 8, 8).unwrap();
        // Sweep total mass S from 0 to 64 by scaling a uniform map.
        for s10 in 0..=640 {
            let s = s10 as f64 / 10.0;
            let p = prob(Array2::from_elem((8, 8), s / 64.0));
            let l = size_loss(&p, &part, 0.7, 0.9, PenaltyKind::Relu, 5.0).unwrap();
            let in_band = (0.7 * 16.0 - 1e-9..=0.9 * 16.0 + 1e-9).contains(&s);
            if in_band {
                assert!(l.abs() < 1e-9, "S={s}: loss {l}");
            } else {
                assert!(l > 0.0, "S={s}: loss {l}");
            }
        }
    }

    #[test]
    fn size_loss_gradient_matches_finite_differences() {
        let b = BoxAnnotation::new(0, 0, 2, 2).unwrap();
        let part = region_partition(&b, 4, 4).unwrap();
        let mut rng = named_stream(22, "loss");
        for kind in [PenaltyKind::Relu, PenaltyKind::LogBarrier] {
            let p = random_prob(4, 4, &mut rng);
            let (_, g) = size_loss_grad(&p, &part, 0.7, 0.9, kind, 5.0).unwrap();
            let num = central_diff_grad(
                |v| size_loss(&prob(v.clone()), &part, 0.7, 0.9, kind, 5.0).unwrap(),
                p.values(),
                1e-6,
            );
            assert!(max_relative_error(&g, &num, 1e-6) < 1e-4, "{kind:?}");
        }
    }

    // ---- emptiness term ----

    #[test]
    fn emptiness_is_zero_when_outside_is_empty() {
        let b = BoxAnnotation::new(1, 1, 4, 4).unwrap();
        let part = region_partition(&b, 8, 8).unwrap();
        let mut v = Array2::zeros((8, 8));
        for y in 1..=4 {
            for x in 1..=4 {
                v[[y, x]] = 0.9;
            }
        }
        let l = emptiness_loss(&prob(v), &part).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn emptiness_saturates_at_the_clamp_for_all_ones() {
        let b = BoxAnnotation::new(1, 1, 4, 4).unwrap();
        let part = region_partition(&b, 8, 8).unwrap();
        let p = prob(Array2::from_elem((8, 8), 1.0));
        let per_pixel = -(1.0 - (1.0 - P_CLAMP)).ln();
        let l = emptiness_loss(&p, &part).unwrap();
        let expect = part.outside_count() as f64 * per_pixel;
        assert!((l - expect).abs() < 1e-9 * expect, "{l} vs {expect}");
    }

    #[test]
    fn emptiness_is_a_sum_not_a_mean() {
        // Doubling the outside area at the same per-pixel probability doubles
        // the loss.
        let p_small = prob(Array2::from_elem((4, 4), 0.3));
        let p_big = prob(Array2::from_elem((4, 8), 0.3));
        let b = BoxAnnotation::new(0, 0, 1, 3).unwrap(); // 8 inside pixels
        let part_small = region_partition(&b, 4, 4).unwrap(); // 8 outside
        let part_big = region_partition(&b, 4, 8).unwrap(); // 24 outside
        let l_small = emptiness_loss(&p_small, &part_small).unwrap();
        let l_big = emptiness_loss(&p_big, &part_big).unwrap();
        assert!((l_big / l_small - 3.0).abs() < 1e-12);
    }

    #[test]
    fn emptiness_gradient_matches_finite_differences() {
        let b = BoxAnnotation::new(0, 0, 1, 1).unwrap();
        let part = region_partition(&b, 4, 4).unwrap();
        let mut rng = named_stream(23, "loss");
        let p = random_prob(4, 4, &mut rng);
        let (_, g) = emptiness_loss_grad(&p, &part).unwrap();
        let num = central_diff_grad(
            |v| emptiness_loss(&prob(v.clone()), &part).unwrap(),
            p.values(),
            1e-6,
        );
        assert!(max_relative_error(&g, &num, 1e-6) < 1e-5);
    }

    // ---- consistency term ----

    #[test]
    fn consistency_is_zero_for_identical_maps() {
        let p = prob(Array2::from_elem((4, 4), 0.42));
        assert_eq!(consistency_loss(&p, &p.clone()).unwrap(), 0.0);
    }

    #[test]
    fn consistency_counts_squared_differences() {
        let mut a = Array2::from_elem((4, 4), 0.5);
        let b = a.clone();
        a[[0, 0]] = 0.7;
        a[[3, 2]] = 0.3;
        let l = consistency_loss(&prob(a), &prob(b)).unwrap();
        assert!((l - (0.04 + 0.04)).abs() < 1e-12);
    }

    #[test]
    fn consistency_gradient_matches_finite_differences() {
        let mut rng = named_stream(24, "loss");
        let s = random_prob(4, 4, &mut rng);
        let t = random_prob(4, 4, &mut rng);
        let (_, g) = consistency_loss_grad(&s, &t).unwrap();
        let num = central_diff_grad(
            |v| consistency_loss(&prob(v.clone()), &t).unwrap(),
            s.values(),
            1e-6,
        );
        assert!(max_relative_error(&g, &num, 1e-6) < 1e-6);
    }

    // ---- composition ----

    #[test]
    fn total_is_the_weighted_sum_of_components() {
        let mut rng = named_stream(25, "loss");
        let cfg = TrainConfig::default();
        let b = BoxAnnotation::new(1, 1, 5, 5).unwrap();
        let part = region_partition(&b, 8, 8).unwrap();
        for _ in 0..10 {
            let p = random_prob(8, 8, &mut rng);
            let y = random_mask(8, 8, &mut rng);
            let s = random_prob(8, 8, &mut rng);
            let t = random_prob(8, 8, &mut rng);
            let bd = total_loss(&p, &y, &part, Some((&s, &t)), &cfg, 5.0).unwrap();
            let recomposed = cfg.lambda_pseudo * bd.pseudo
                + cfg.lambda_size * bd.size
                + cfg.lambda_empty * bd.empty
                + cfg.lambda_cons * bd.cons;
            assert!((bd.total - recomposed).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_consistency_pair_reports_zero_component() {
        let cfg = TrainConfig::default();
        let b = BoxAnnotation::new(1, 1, 5, 5).unwrap();
        let part = region_partition(&b, 8, 8).unwrap();
        let p = prob(Array2::from_elem((8, 8), 0.4));
        let y = BinaryMask::zeros(8, 8);
        let bd = total_loss(&p, &y, &part, None, &cfg, 5.0).unwrap();
        assert_eq!(bd.cons, 0.0);
    }

    #[test]
    fn degenerate_zero_inputs_stay_finite_and_negligible() {
        // All-zero predictions with an empty pseudo-label: every term is
        // ~0 (CE is bounded by the clamp) and nothing blows up.
        let cfg = TrainConfig {
            lambda_size: 0.0,
            penalty: PenaltyKind::Relu,
            ..TrainConfig::default()
        };
        let p = prob(Array2::zeros((8, 8)));
        let y = BinaryMask::zeros(8, 8);
        let b = BoxAnnotation::new(1, 1, 5, 5).unwrap();
        let part = region_partition(&b, 8, 8).unwrap();
        let z = prob(Array2::zeros((8, 8)));
        let bd = total_loss(&p, &y, &part, Some((&z, &z.clone())), &cfg, 5.0).unwrap();
        assert!(bd.is_finite());
        assert!(bd.total.abs() < 1e-4, "total = {}", bd.total);
        assert_eq!(bd.cons, 0.0);
    }

    #[test]
    fn nonnegative_terms_stay_nonnegative() {
        let mut rng = named_stream(26, "loss");
        let b = BoxAnnotation::new(2, 2, 5, 5).unwrap();
        let part = region_partition(&b, 8, 8).unwrap();
        for _ in 0..100 {
            let p = random_prob(8, 8, &mut rng);
            let y = random_mask(8, 8, &mut rng);
            let s = random_prob(8, 8, &mut rng);
            let t = random_prob(8, 8, &mut rng);
            assert!(pseudo_label_loss(&p, &y, 1.0, 1.0).unwrap() >= 0.0);
            assert!(emptiness_loss(&p, &part).unwrap() >= 0.0);
            assert!(consistency_loss(&s, &t).unwrap() >= 0.0);
            // The ReLU-shaped size loss is nonnegative as well; the
            // log-barrier variant rewards the strictly feasible band with
            // negative values by construction, so it is excluded here.
            assert!(
                size_loss(&p, &part, 0.7, 0.9, PenaltyKind::Relu, 5.0).unwrap() >= 0.0
            );
        }
    }
}
