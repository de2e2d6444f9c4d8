//! Evaluation metrics: Dice similarity (as a percentage), average symmetric
//! surface distance over 4-neighbourhood contours, and mean/std aggregation.

use serde::{Deserialize, Serialize};

use crate::domain::BinaryMask;
use crate::error::{Error, Result};

/// Dice similarity coefficient as a percentage in `[0, 100]`:
/// `100 * 2|A∩B| / (|A| + |B|)`. Two empty masks are in perfect agreement
/// and score 100.
pub fn dsc(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.size() != b.size() {
        return Err(Error::Shape(format!(
            "dsc: mask sizes differ ({:?} vs {:?})",
            a.size(),
            b.size()
        )));
    }
    let mut inter = 0usize;
    let mut ca = 0usize;
    let mut cb = 0usize;
    for (&x, &y) in a.values().iter().zip(b.values().iter()) {
        ca += x as usize;
        cb += y as usize;
        inter += (x & y) as usize;
    }
    if ca + cb == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * 2.0 * inter as f64 / (ca + cb) as f64)
}

/// The boundary pixels of a mask: every foreground pixel with at least one
/// background 4-neighbour, where pixels beyond the image border count as
/// background. Points are `(x, y)` pixel centers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContourSet {
    pub points: Vec<(usize, usize)>,
}

impl ContourSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Extract the 4-neighbourhood contour of a mask.
pub fn extract_contour(mask: &BinaryMask) -> ContourSet {
    let (h, w) = mask.size();
    let mut points = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) != 1 {
                continue;
            }
            let boundary = y == 0
                || x == 0
                || y == h - 1
                || x == w - 1
                || mask.get(y - 1, x) == 0
                || mask.get(y + 1, x) == 0
                || mask.get(y, x - 1) == 0
                || mask.get(y, x + 1) == 0;
            if boundary {
                points.push((x, y));
            }
        }
    }
    ContourSet { points }
}

/// How a pair of empty contours scores in [`assd`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyEmptyPolicy {
    /// Pessimistic (default): the same image-diagonal distance that a single
    /// empty contour incurs.
    Diagonal,
    /// Two empty masks agree perfectly: distance 0.
    Zero,
}

impl Default for EmptyEmptyPolicy {
    fn default() -> Self {
        EmptyEmptyPolicy::Diagonal
    }
}

/// Average symmetric surface distance between two masks, in pixels.
///
/// Contours are 4-neighbourhood boundaries; distances are exact Euclidean
/// distances between pixel centers. When exactly one contour is empty, every
/// distance to it is taken as the image diagonal `sqrt(H^2 + W^2)` — the
/// worst case — and that is also the result. A pair of empty contours scores
/// per `policy` (diagonal by default; the frequency of such pairs is worth
/// reporting alongside aggregates).
pub fn assd(a: &BinaryMask, b: &BinaryMask, policy: EmptyEmptyPolicy) -> Result<f64> {
    if a.size() != b.size() {
        return Err(Error::Shape(format!(
            "assd: mask sizes differ ({:?} vs {:?})",
            a.size(),
            b.size()
        )));
    }
    let (h, w) = a.size();
    let diagonal = ((h * h + w * w) as f64).sqrt();
    let ca = extract_contour(a);
    let cb = extract_contour(b);
    match (ca.is_empty(), cb.is_empty()) {
        (true, true) => {
            return Ok(match policy {
                EmptyEmptyPolicy::Diagonal => diagonal,
                EmptyEmptyPolicy::Zero => 0.0,
            })
        }
        (true, false) | (false, true) => return Ok(diagonal),
        (false, false) => {}
    }
    let mut sum = 0.0;
    for &p in &ca.points {
        sum += min_distance(p, &cb);
    }
    for &q in &cb.points {
        sum += min_distance(q, &ca);
    }
    Ok(sum / (ca.len() + cb.len()) as f64)
}

fn min_distance(p: (usize, usize), contour: &ContourSet) -> f64 {
    let mut best = f64::INFINITY;
    for &(qx, qy) in &contour.points {
        let dx = p.0 as f64 - qx as f64;
        let dy = p.1 as f64 - qy as f64;
        let d2 = dx * dx + dy * dy;
        if d2 < best {
            best = d2;
        }
    }
    best.sqrt()
}

/// Which std estimator [`aggregate`] uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StdMode {
    /// Bessel-corrected (n - 1); the default for trial aggregation.
    Sample,
    Population,
}

impl Default for StdMode {
    fn default() -> Self {
        StdMode::Sample
    }
}

/// Mean and standard deviation of a metric across samples or trials.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Aggregate a metric series. A single value has std 0 under either mode;
/// an empty series is an error.
pub fn aggregate(values: &[f64], mode: StdMode) -> Result<Aggregate> {
    if values.is_empty() {
        return Err(Error::Shape("cannot aggregate an empty series".into()));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    let std = match (mode, n) {
        (_, 1) => 0.0,
        (StdMode::Sample, _) => (ss / (n as f64 - 1.0)).sqrt(),
        (StdMode::Population, _) => (ss / n as f64).sqrt(),
    };
    Ok(Aggregate { mean, std, n })
}
