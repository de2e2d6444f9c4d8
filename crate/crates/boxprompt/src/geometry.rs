//! Box/mask geometry: tight boxes, region partitions, annotation-noise
//! perturbation, spatial transforms for the consistency term, and
//! connected-component filtering.
//!
//! All functions follow the crate-wide convention of `x` = column, `y` = row,
//! origin top-left, inclusive box corners.

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{BinaryMask, BoxAnnotation, EmbeddingTensor, Image, ProbabilityMap, RegionPartition};
use crate::error::{Error, Result};

/// The transform families available to the consistency term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    Identity,
    Rot90,
    Rot180,
    Rot270,
    HFlip,
    VFlip,
    Translate,
    Scale,
}

/// A sampled spatial transform, applicable to any tensor on its trailing two
/// axes.
///
/// Translate offsets are stored as *fractions* of the spatial extent so the
/// same sampled transform acts proportionally on a full-resolution image and
/// on the coarse embedding grid; each grid rounds the offset to whole cells
/// (nearest) and fills vacated cells with zero. Scale resamples
/// nearest-neighbor about the grid center with zero fill, so binary masks
/// stay binary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeometricTransform {
    Identity,
    /// 90 degrees counter-clockwise. Requires square spatial extent.
    Rot90,
    Rot180,
    /// 270 degrees counter-clockwise. Requires square spatial extent.
    Rot270,
    /// Mirror across the vertical axis (columns reversed).
    HFlip,
    /// Mirror across the horizontal axis (rows reversed).
    VFlip,
    Translate { dx_frac: f64, dy_frac: f64 },
    Scale { factor: f64 },
}

/// Largest translate magnitude sampled per axis, as a fraction of the extent.
pub const MAX_TRANSLATE_FRAC: f64 = 0.125;
/// Scale factors are sampled uniformly from this range.
pub const SCALE_RANGE: (f64, f64) = (0.8, 1.25);

impl GeometricTransform {
    pub fn kind(&self) -> TransformKind {
        match self {
            Self::Identity => TransformKind::Identity,
            Self::Rot90 => TransformKind::Rot90,
            Self::Rot180 => TransformKind::Rot180,
            Self::Rot270 => TransformKind::Rot270,
            Self::HFlip => TransformKind::HFlip,
            Self::VFlip => TransformKind::VFlip,
            Self::Translate { .. } => TransformKind::Translate,
            Self::Scale { .. } => TransformKind::Scale,
        }
    }

    /// Whether this transform is an exact bijection on pixel grids.
    /// Translate and scale resample with zero fill and are excluded from
    /// round-trip invariants.
    pub fn is_exact(&self) -> bool {
        !matches!(self, Self::Translate { .. } | Self::Scale { .. })
    }

    /// Exact inverse, where one exists.
    pub fn inverse(&self) -> Option<GeometricTransform> {
        match self {
            Self::Identity => Some(Self::Identity),
            Self::Rot90 => Some(Self::Rot270),
            Self::Rot270 => Some(Self::Rot90),
            Self::Rot180 => Some(Self::Rot180),
            Self::HFlip => Some(Self::HFlip),
            Self::VFlip => Some(Self::VFlip),
            Self::Translate { .. } | Self::Scale { .. } => None,
        }
    }
}

/// Tight bounding box of a mask's foreground.
///
/// A mask whose foreground is a single pixel (or a single row/column) would
/// yield degenerate corners, so the degenerate axis is widened by one pixel
/// per side where image bounds allow.
pub fn box_from_mask(mask: &BinaryMask) -> Result<BoxAnnotation> {
    let (h, w) = mask.size();
    let mut x_min = usize::MAX;
    let mut x_max = 0usize;
    let mut y_min = usize::MAX;
    let mut y_max = 0usize;
    let mut any = false;
    for ((y, x), &v) in mask.values().indexed_iter() {
        if v == 1 {
            any = true;
            x_min = x_min.min(x);
            x_max = x_max.max(x);
            y_min = y_min.min(y);
            y_max = y_max.max(y);
        }
    }
    if !any {
        return Err(Error::Box("empty mask has no bounding box".into()));
    }
    if x_min == x_max {
        x_min = x_min.saturating_sub(1);
        x_max = (x_max + 1).min(w - 1);
        if x_min == x_max {
            return Err(Error::Box("cannot widen degenerate box: image is 1 pixel wide".into()));
        }
    }
    if y_min == y_max {
        y_min = y_min.saturating_sub(1);
        y_max = (y_max + 1).min(h - 1);
        if y_min == y_max {
            return Err(Error::Box("cannot widen degenerate box: image is 1 pixel tall".into()));
        }
    }
    BoxAnnotation::new(x_min, y_min, x_max, y_max)
}

/// Split an `(h, w)` image into the inside/outside pixel sets of a box.
pub fn region_partition(b: &BoxAnnotation, h: usize, w: usize) -> Result<RegionPartition> {
    b.validate_within(h, w)?;
    let mut inside = Array2::<u8>::zeros((h, w));
    for y in b.y_min..=b.y_max {
        for x in b.x_min..=b.x_max {
            inside[[y, x]] = 1;
        }
    }
    let inside_count = b.area();
    Ok(RegionPartition::from_parts(inside, inside_count, h * w - inside_count))
}

/// Simulate annotation noise on a box.
///
/// Each of the four boundaries is displaced independently: a magnitude is
/// drawn uniformly from `[lo * L, hi * L]` pixels with `L = sqrt(h * w)`
/// (the band factors are fractions of that length scale), a direction is
/// drawn uniformly from {outward, inward}, and the displacement is rounded
/// to whole pixels. The result is clipped to the image, corners are
/// re-ordered if they crossed, and a collapsed axis is widened one pixel per
/// side. Draw order per boundary is magnitude then direction, in the order
/// x_min, x_max, y_min, y_max.
pub fn perturb_box(
    b: &BoxAnnotation,
    h: usize,
    w: usize,
    noise_lo: f64,
    noise_hi: f64,
    rng: &mut impl Rng,
) -> Result<BoxAnnotation> {
    b.validate_within(h, w)?;
    if !(0.0..=1.0).contains(&noise_lo) || !(0.0..=1.0).contains(&noise_hi) || noise_lo > noise_hi {
        return Err(Error::Config(format!(
            "noise band must satisfy 0 <= lo <= hi <= 1, got [{noise_lo}, {noise_hi}]"
        )));
    }
    let scale = ((h * w) as f64).sqrt();
    let draw = |rng: &mut dyn rand::RngCore, outward_sign: i64| -> i64 {
        let mag: f64 = if noise_lo == noise_hi {
            noise_lo * scale
        } else {
            rng.gen_range(noise_lo * scale..=noise_hi * scale)
        };
        let outward = rng.gen_bool(0.5);
        let d = mag.round() as i64;
        if outward {
            outward_sign * d
        } else {
            -outward_sign * d
        }
    };
    let mut x_min = b.x_min as i64 + draw(rng, -1);
    let mut x_max = b.x_max as i64 + draw(rng, 1);
    let mut y_min = b.y_min as i64 + draw(rng, -1);
    let mut y_max = b.y_max as i64 + draw(rng, 1);
    x_min = x_min.clamp(0, w as i64 - 1);
    x_max = x_max.clamp(0, w as i64 - 1);
    y_min = y_min.clamp(0, h as i64 - 1);
    y_max = y_max.clamp(0, h as i64 - 1);
    if x_min > x_max {
        std::mem::swap(&mut x_min, &mut x_max);
    }
    if y_min > y_max {
        std::mem::swap(&mut y_min, &mut y_max);
    }
    if x_min == x_max {
        if x_min > 0 {
            x_min -= 1;
        }
        if x_max < w as i64 - 1 {
            x_max += 1;
        }
        if x_min == x_max {
            return Err(Error::Box("cannot repair perturbed box: image is 1 pixel wide".into()));
        }
    }
    if y_min == y_max {
        if y_min > 0 {
            y_min -= 1;
        }
        if y_max < h as i64 - 1 {
            y_max += 1;
        }
        if y_min == y_max {
            return Err(Error::Box("cannot repair perturbed box: image is 1 pixel tall".into()));
        }
    }
    BoxAnnotation::new(x_min as usize, y_min as usize, x_max as usize, y_max as usize)
}

/// Draw one transform uniformly from the configured pool, then draw its
/// parameters (translate fractions, scale factor) where the kind has any.
/// An empty pool yields the identity.
pub fn sample_transform(pool: &[TransformKind], rng: &mut impl Rng) -> GeometricTransform {
    if pool.is_empty() {
        return GeometricTransform::Identity;
    }
    let kind = pool[rng.gen_range(0..pool.len())];
    match kind {
        TransformKind::Identity => GeometricTransform::Identity,
        TransformKind::Rot90 => GeometricTransform::Rot90,
        TransformKind::Rot180 => GeometricTransform::Rot180,
        TransformKind::Rot270 => GeometricTransform::Rot270,
        TransformKind::HFlip => GeometricTransform::HFlip,
        TransformKind::VFlip => GeometricTransform::VFlip,
        TransformKind::Translate => GeometricTransform::Translate {
            dx_frac: rng.gen_range(-MAX_TRANSLATE_FRAC..=MAX_TRANSLATE_FRAC),
            dy_frac: rng.gen_range(-MAX_TRANSLATE_FRAC..=MAX_TRANSLATE_FRAC),
        },
        TransformKind::Scale => GeometricTransform::Scale {
            factor: rng.gen_range(SCALE_RANGE.0..=SCALE_RANGE.1),
        },
    }
}

fn transform_plane<T: Copy>(
    t: &GeometricTransform,
    src: &ArrayView2<'_, T>,
    zero: T,
) -> Result<Array2<T>> {
    let (h, w) = src.dim();
    match t {
        GeometricTransform::Identity => Ok(src.to_owned()),
        GeometricTransform::Rot90 | GeometricTransform::Rot270 if h != w => Err(Error::Shape(
            format!("quarter rotations need a square extent, got {h}x{w}"),
        )),
        GeometricTransform::Rot90 => {
            let n = h;
            Ok(Array2::from_shape_fn((n, n), |(y, x)| src[[x, n - 1 - y]]))
        }
        GeometricTransform::Rot270 => {
            let n = h;
            Ok(Array2::from_shape_fn((n, n), |(y, x)| src[[n - 1 - x, y]]))
        }
        GeometricTransform::Rot180 => {
            Ok(Array2::from_shape_fn((h, w), |(y, x)| src[[h - 1 - y, w - 1 - x]]))
        }
        GeometricTransform::HFlip => {
            Ok(Array2::from_shape_fn((h, w), |(y, x)| src[[y, w - 1 - x]]))
        }
        GeometricTransform::VFlip => {
            Ok(Array2::from_shape_fn((h, w), |(y, x)| src[[h - 1 - y, x]]))
        }
        GeometricTransform::Translate { dx_frac, dy_frac } => {
            let sx = (dx_frac * w as f64).round() as i64;
            let sy = (dy_frac * h as f64).round() as i64;
            Ok(Array2::from_shape_fn((h, w), |(y, x)| {
                let ys = y as i64 - sy;
                let xs = x as i64 - sx;
                if ys >= 0 && ys < h as i64 && xs >= 0 && xs < w as i64 {
                    src[[ys as usize, xs as usize]]
                } else {
                    zero
                }
            }))
        }
        GeometricTransform::Scale { factor } => {
            if !factor.is_finite() || *factor <= 0.0 {
                return Err(Error::Config(format!("scale factor must be > 0, got {factor}")));
            }
            let cy = (h as f64 - 1.0) / 2.0;
            let cx = (w as f64 - 1.0) / 2.0;
            Ok(Array2::from_shape_fn((h, w), |(y, x)| {
                let ys = (cy + (y as f64 - cy) / factor).round();
                let xs = (cx + (x as f64 - cx) / factor).round();
                if ys >= 0.0 && ys < h as f64 && xs >= 0.0 && xs < w as f64 {
                    src[[ys as usize, xs as usize]]
                } else {
                    zero
                }
            }))
        }
    }
}

/// Apply a transform to the trailing two axes of a channel-first tensor.
pub fn apply_transform_channels(t: &GeometricTransform, src: &Array3<f64>) -> Result<Array3<f64>> {
    let (c, h, w) = src.dim();
    let (oh, ow) = match t {
        GeometricTransform::Rot90 | GeometricTransform::Rot270 => (w, h),
        _ => (h, w),
    };
    let mut out = Array3::zeros((c, oh, ow));
    for ci in 0..c {
        let plane = transform_plane(t, &src.index_axis(Axis(0), ci), 0.0)?;
        out.index_axis_mut(Axis(0), ci).assign(&plane);
    }
    Ok(out)
}

/// Types a [`GeometricTransform`] can act on.
pub trait Transformable: Sized {
    fn apply_transform(&self, t: &GeometricTransform) -> Result<Self>;
}

impl Transformable for BinaryMask {
    fn apply_transform(&self, t: &GeometricTransform) -> Result<Self> {
        let plane = transform_plane(t, &self.values().view(), 0u8)?;
        BinaryMask::new(plane)
    }
}

impl Transformable for ProbabilityMap {
    fn apply_transform(&self, t: &GeometricTransform) -> Result<Self> {
        let plane = transform_plane(t, &self.values().view(), 0.0)?;
        ProbabilityMap::new(plane)
    }
}

impl Transformable for Image {
    fn apply_transform(&self, t: &GeometricTransform) -> Result<Self> {
        Image::new(apply_transform_channels(t, self.pixels())?)
    }
}

impl Transformable for EmbeddingTensor {
    fn apply_transform(&self, t: &GeometricTransform) -> Result<Self> {
        Ok(EmbeddingTensor::new(apply_transform_channels(t, self.values())?))
    }
}

/// Free-function form of [`Transformable::apply_transform`].
pub fn apply_transform<T: Transformable>(t: &GeometricTransform, x: &T) -> Result<T> {
    x.apply_transform(t)
}

/// Keep only the largest 4-connected foreground component, and only if it has
/// at least `min_size` pixels; everything else becomes background.
pub fn largest_component_filter(mask: &BinaryMask, min_size: usize) -> BinaryMask {
    let (h, w) = mask.size();
    let mut labels = Array2::<u32>::zeros((h, w));
    let mut best_label = 0u32;
    let mut best_size = 0usize;
    let mut next = 1u32;
    let mut queue = std::collections::VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) == 1 && labels[[y, x]] == 0 {
                let label = next;
                next += 1;
                let mut size = 0usize;
                labels[[y, x]] = label;
                queue.push_back((y, x));
                while let Some((cy, cx)) = queue.pop_front() {
                    size += 1;
                    let mut visit = |ny: usize, nx: usize| {
                        if mask.get(ny, nx) == 1 && labels[[ny, nx]] == 0 {
                            labels[[ny, nx]] = label;
                            queue.push_back((ny, nx));
                        }
                    };
                    if cy > 0 {
                        visit(cy - 1, cx);
                    }
                    if cy + 1 < h {
                        visit(cy + 1, cx);
                    }
                    if cx > 0 {
                        visit(cy, cx - 1);
                    }
                    if cx + 1 < w {
                        visit(cy, cx + 1);
                    }
                }
                if size > best_size {
                    best_size = size;
                    best_label = label;
                }
            }
        }
    }
    if best_size < min_size {
        return BinaryMask::zeros(h, w);
    }
    let values = labels.mapv(|l| u8::from(l == best_label));
    BinaryMask::new(values).expect("labels map to 0/1")
}
