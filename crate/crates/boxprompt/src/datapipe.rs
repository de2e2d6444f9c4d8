//! Dataset plumbing: manifests, image and volume IO, preprocessing, and the
//! synthetic scene generator.
//!
//! A dataset on disk is a directory with a JSONL manifest plus PNG images
//! and masks. The manifest's first line is a header carrying a content
//! fingerprint over the sample lines, so silent edits are caught at load
//! time; sample lines list id, image path, box corners, optional mask path
//! and split. No timestamps anywhere — writing the same dataset twice
//! produces identical bytes.
//!
//! Volumetric sources arrive as `.vol` files (dims, voxel spacing, f32
//! voxels, checksum). [`samples_from_volume`] turns one scan plus its label
//! volume into 2D training samples: intensity percentile-clip and rescale,
//! in-plane resample to 1 mm spacing, center crop/pad to the target extent,
//! keep only slices where the structure appears, and derive the tight box
//! from each slice's mask.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{BinaryMask, BoxAnnotation, Image, Sample};
use crate::error::{Error, Result};
use crate::geometry::box_from_mask;
use crate::nn::bilinear_upsample_plane;
use crate::util::{fnv1a64, fnv1a64_extend, named_stream, path_safe_id, FNV_OFFSET};

/// Intensity clip percentiles applied before rescaling to `[0, 255]`.
pub const CLIP_LO_PCT: f64 = 0.5;
pub const CLIP_HI_PCT: f64 = 99.5;

// ---------------------------------------------------------------------------
// Manifests

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestHeader {
    format: String,
    version: u32,
    /// FNV-1a (hex) over the sample lines, each including its newline.
    fingerprint: String,
}

const MANIFEST_FORMAT: &str = "boxprompt-dataset";
const MANIFEST_VERSION: u32 = 1;

/// One sample line of a dataset manifest. Paths are relative to the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image: String,
    /// `[x_min, y_min, x_max, y_max]`, inclusive pixel corners.
    pub bbox: [usize; 4],
    pub mask: Option<String>,
    pub split: Split,
}

/// Serialize a manifest: header line, then one JSON line per entry, in the
/// given order. Rejects duplicate ids.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for e in entries {
        if !seen.insert(&e.id) {
            return Err(Error::Manifest(format!("duplicate sample id '{}'", e.id)));
        }
    }
    let mut body = String::new();
    for e in entries {
        body.push_str(&serde_json::to_string(e)?);
        body.push('\n');
    }
    let header = ManifestHeader {
        format: MANIFEST_FORMAT.to_string(),
        version: MANIFEST_VERSION,
        fingerprint: format!("{:016x}", fnv1a64(body.as_bytes())),
    };
    let mut f = fs::File::create(path)?;
    writeln!(f, "{}", serde_json::to_string(&header)?)?;
    f.write_all(body.as_bytes())?;
    Ok(())
}

/// Parse and verify a manifest: header format/version, content fingerprint,
/// unique ids.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = fs::File::open(path)
        .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    let mut lines = BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::Manifest(format!("{}: empty manifest", path.display())))??;
    let header: ManifestHeader = serde_json::from_str(&header_line)
        .map_err(|e| Error::Manifest(format!("{}: bad header: {e}", path.display())))?;
    if header.format != MANIFEST_FORMAT {
        return Err(Error::Manifest(format!(
            "{}: format '{}' is not a dataset manifest",
            path.display(),
            header.format
        )));
    }
    if header.version != MANIFEST_VERSION {
        return Err(Error::Manifest(format!(
            "{}: unsupported manifest version {}",
            path.display(),
            header.version
        )));
    }
    let mut body = String::new();
    let mut entries = Vec::new();
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        body.push_str(&line);
        body.push('\n');
        entries.push(serde_json::from_str::<ManifestEntry>(&line).map_err(|e| {
            Error::Manifest(format!("{}: bad sample line: {e}", path.display()))
        })?);
    }
    let fingerprint = format!("{:016x}", fnv1a64(body.as_bytes()));
    if fingerprint != header.fingerprint {
        return Err(Error::Manifest(format!(
            "{}: fingerprint mismatch (manifest edited or truncated)",
            path.display()
        )));
    }
    let mut seen = BTreeSet::new();
    for e in &entries {
        if !seen.insert(&e.id) {
            return Err(Error::Manifest(format!(
                "{}: duplicate sample id '{}'",
                path.display(),
                e.id
            )));
        }
    }
    Ok(entries)
}

/// Load the samples of one split (or all of them) with their images and
/// masks. Every referenced file must exist.
pub fn load_split(manifest_path: &Path, split: Option<Split>) -> Result<Vec<Sample>> {
    let entries = read_manifest(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut samples = Vec::new();
    for e in entries {
        if let Some(want) = split {
            if e.split != want {
                continue;
            }
        }
        let image_path = dir.join(&e.image);
        if !image_path.is_file() {
            return Err(Error::Manifest(format!(
                "sample '{}': image file missing: {}",
                e.id,
                image_path.display()
            )));
        }
        let image = load_image_png(&image_path)?;
        let reference_mask = match &e.mask {
            Some(rel) => {
                let mask_path = dir.join(rel);
                if !mask_path.is_file() {
                    return Err(Error::Manifest(format!(
                        "sample '{}': mask file missing: {}",
                        e.id,
                        mask_path.display()
                    )));
                }
                Some(load_mask_png(&mask_path)?)
            }
            None => None,
        };
        let [x_min, y_min, x_max, y_max] = e.bbox;
        let sample = Sample {
            id: e.id,
            image,
            box_annotation: BoxAnnotation::new(x_min, y_min, x_max, y_max)?,
            reference_mask,
        };
        sample.validate()?;
        samples.push(sample);
    }
    Ok(samples)
}

/// The manifest entries [`export_dataset`] would write for these items,
/// ordered by id — lets callers compare fingerprints before touching disk.
pub fn dataset_entries(items: &[(Sample, Split)]) -> Vec<ManifestEntry> {
    let mut sorted: Vec<&(Sample, Split)> = items.iter().collect();
    sorted.sort_by(|a, b| a.0.id.cmp(&b.0.id));
    sorted
        .into_iter()
        .map(|(sample, split)| {
            let stem = path_safe_id(&sample.id);
            let b = &sample.box_annotation;
            ManifestEntry {
                id: sample.id.clone(),
                image: format!("images/{stem}.png"),
                bbox: [b.x_min, b.y_min, b.x_max, b.y_max],
                mask: sample.reference_mask.as_ref().map(|_| format!("masks/{stem}.png")),
                split: *split,
            }
        })
        .collect()
}

/// Content fingerprint (hex) of a manifest entry list — identical to the
/// fingerprint [`write_manifest`] puts in the header for these entries.
pub fn entries_fingerprint(entries: &[ManifestEntry]) -> Result<String> {
    let mut body = String::new();
    for e in entries {
        body.push_str(&serde_json::to_string(e)?);
        body.push('\n');
    }
    Ok(format!("{:016x}", fnv1a64(body.as_bytes())))
}

/// Write a dataset directory: `images/`, `masks/` and the manifest. Entries
/// are ordered by id, so the output is byte-reproducible.
pub fn export_dataset(dir: &Path, items: &[(Sample, Split)]) -> Result<PathBuf> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let entries = dataset_entries(items);
    let by_id: std::collections::BTreeMap<&str, &Sample> =
        items.iter().map(|(s, _)| (s.id.as_str(), s)).collect();
    for e in &entries {
        let sample = by_id[e.id.as_str()];
        save_image_png(&sample.image, &dir.join(&e.image))?;
        if let (Some(rel), Some(mask)) = (&e.mask, &sample.reference_mask) {
            save_mask_png(mask, &dir.join(rel))?;
        }
    }
    let manifest_path = dir.join("manifest.jsonl");
    write_manifest(&manifest_path, &entries)?;
    Ok(manifest_path)
}

/// The fingerprint recorded in a manifest's header line, without loading the
/// samples.
pub fn manifest_fingerprint(path: &Path) -> Result<String> {
    let entries = read_manifest(path)?;
    entries_fingerprint(&entries)
}

// ---------------------------------------------------------------------------
// PNG IO

/// Load a grayscale PNG as an image (values 0..=255).
pub fn load_image_png(path: &Path) -> Result<Image> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    let plane = Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        f64::from(img.get_pixel(x as u32, y as u32)[0])
    });
    Image::from_grayscale(plane)
}

/// Save an image's gray channel as an 8-bit PNG (values rounded).
pub fn save_image_png(image: &Image, path: &Path) -> Result<()> {
    let (h, w) = image.size();
    let mut out = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = image.gray(y, x).round().clamp(0.0, 255.0) as u8;
            out.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    out.save(path)?;
    Ok(())
}

/// Load a PNG as a binary mask: pixels at or above half intensity count as
/// foreground.
pub fn load_mask_png(path: &Path) -> Result<BinaryMask> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    let values = Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        u8::from(img.get_pixel(x as u32, y as u32)[0] >= 128)
    });
    BinaryMask::new(values)
}

/// Save a binary mask as a 0/255 PNG.
pub fn save_mask_png(mask: &BinaryMask, path: &Path) -> Result<()> {
    let (h, w) = mask.size();
    let mut out = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            out.put_pixel(x as u32, y as u32, image::Luma([mask.get(y, x) * 255]));
        }
    }
    out.save(path)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Volumes

const VOLUME_MAGIC: &[u8; 4] = b"BPV1";

/// A 3D scan: `(slices, rows, cols)` voxels with per-axis spacing in mm.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub data: Array3<f64>,
    /// `(between-slice, row, column)` spacing in millimetres.
    pub spacing: (f64, f64, f64),
}

impl Volume {
    /// Serialize: magic, dims, spacing (f32), payload checksum, then voxels
    /// as little-endian f32.
    pub fn write(&self, path: &Path) -> Result<()> {
        let (d, h, w) = self.data.dim();
        let mut payload = Vec::with_capacity(d * h * w * 4);
        for &v in self.data.iter() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let mut buf = Vec::new();
        buf.extend_from_slice(VOLUME_MAGIC);
        for dim in [d, h, w] {
            buf.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for s in [self.spacing.0, self.spacing.1, self.spacing.2] {
            buf.extend_from_slice(&(s as f32).to_le_bytes());
        }
        buf.extend_from_slice(&fnv1a64(&payload).to_le_bytes());
        buf.extend_from_slice(&payload);
        fs::File::create(path)?.write_all(&buf)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let fail = |msg: &str| Error::Corrupt(format!("{}: {msg}", path.display()));
        let mut off = 0usize;
        let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
            if *off + n > bytes.len() {
                return Err(fail("truncated volume"));
            }
            let s = &bytes[*off..*off + n];
            *off += n;
            Ok(s)
        };
        if take(&mut off, 4)? != VOLUME_MAGIC {
            return Err(fail("bad magic"));
        }
        let mut dims = [0usize; 3];
        for dim in &mut dims {
            *dim = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
        }
        let mut spacing = [0f64; 3];
        for s in &mut spacing {
            *s = f64::from(f32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()));
        }
        let checksum = u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap());
        let n: usize = dims.iter().product();
        let payload = take(&mut off, n * 4)?;
        if off != bytes.len() {
            return Err(fail("trailing bytes"));
        }
        if fnv1a64(payload) != checksum {
            return Err(fail("voxel checksum mismatch"));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        Ok(Self {
            data: Array3::from_shape_vec((dims[0], dims[1], dims[2]), data)
                .map_err(|e| fail(&e.to_string()))?,
            spacing: (spacing[0], spacing[1], spacing[2]),
        })
    }
}

// ---------------------------------------------------------------------------
// Preprocessing

fn percentile_of_sorted(sorted: &[f64], pct: f64) -> f64 {
    // Linear interpolation between closest ranks.
    let rank = pct / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Clip to the `[lo_pct, hi_pct]` percentile band and rescale that band to
/// `[0, 255]`. A constant input maps to all zeros.
pub fn percentile_normalize(data: &Array3<f64>, lo_pct: f64, hi_pct: f64) -> Array3<f64> {
    let mut sorted: Vec<f64> = data.iter().copied().collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite voxels"));
    let lo = percentile_of_sorted(&sorted, lo_pct);
    let hi = percentile_of_sorted(&sorted, hi_pct);
    if hi <= lo {
        return Array3::zeros(data.dim());
    }
    data.mapv(|v| (v.clamp(lo, hi) - lo) / (hi - lo) * 255.0)
}

/// Nearest-neighbour resample with the same half-pixel-centre convention as
/// the bilinear path, so masks and intensities stay aligned.
pub fn resize_nearest_plane(src: &Array2<f64>, out_dim: (usize, usize)) -> Array2<f64> {
    let (h_in, w_in) = src.dim();
    let (h_out, w_out) = out_dim;
    Array2::from_shape_fn(out_dim, |(y, x)| {
        let sy = (((y as f64 + 0.5) * h_in as f64 / h_out as f64 - 0.5).round())
            .clamp(0.0, (h_in - 1) as f64) as usize;
        let sx = (((x as f64 + 0.5) * w_in as f64 / w_out as f64 - 0.5).round())
            .clamp(0.0, (w_in - 1) as f64) as usize;
        src[[sy, sx]]
    })
}

/// Center crop (when larger) and/or zero-pad (when smaller) to `out_dim`.
pub fn center_crop_pad_plane(src: &Array2<f64>, out_dim: (usize, usize), fill: f64) -> Array2<f64> {
    let (h_in, w_in) = src.dim();
    let (h_out, w_out) = out_dim;
    let mut out = Array2::from_elem(out_dim, fill);
    // Per axis: where the copied band starts in source and destination.
    let (sy, dy, ny) = crop_pad_axis(h_in, h_out);
    let (sx, dx, nx) = crop_pad_axis(w_in, w_out);
    for y in 0..ny {
        for x in 0..nx {
            out[[dy + y, dx + x]] = src[[sy + y, sx + x]];
        }
    }
    out
}

fn crop_pad_axis(input: usize, output: usize) -> (usize, usize, usize) {
    if input >= output {
        ((input - output) / 2, 0, output)
    } else {
        (0, (output - input) / 2, input)
    }
}

/// Turn one scan and its label volume into 2D samples: normalize, resample
/// in-plane to 1 mm, crop/pad to `target`, keep slices where the structure
/// appears, and read the tight box off each slice's mask.
pub fn samples_from_volume(
    prefix: &str,
    scan: &Volume,
    labels: &Volume,
    target: (usize, usize),
) -> Result<Vec<Sample>> {
    if scan.data.dim() != labels.data.dim() {
        return Err(Error::Shape(format!(
            "scan is {:?} but labels are {:?}",
            scan.data.dim(),
            labels.data.dim()
        )));
    }
    for &v in labels.data.iter() {
        if v != 0.0 && v != 1.0 {
            return Err(Error::Corrupt(format!("label volume has non-binary voxel {v}")));
        }
    }
    let normalized = percentile_normalize(&scan.data, CLIP_LO_PCT, CLIP_HI_PCT);
    let (d, h, w) = normalized.dim();
    // In-plane extent after resampling to 1 mm.
    let h_mm = ((h as f64 * scan.spacing.1).round() as usize).max(1);
    let w_mm = ((w as f64 * scan.spacing.2).round() as usize).max(1);
    let mut samples = Vec::new();
    for k in 0..d {
        let plane = normalized.index_axis(ndarray::Axis(0), k).to_owned();
        let label = labels.data.index_axis(ndarray::Axis(0), k).to_owned();
        let plane = bilinear_upsample_plane(&plane, (h_mm, w_mm));
        let label = resize_nearest_plane(&label, (h_mm, w_mm));
        let plane = center_crop_pad_plane(&plane, target, 0.0);
        let label = center_crop_pad_plane(&label, target, 0.0);
        let mask = BinaryMask::new(label.mapv(|v| v as u8))?;
        if mask.is_empty() {
            continue; // the structure is not on this slice
        }
        let b = box_from_mask(&mask)?;
        samples.push(Sample {
            id: format!("{prefix}-{k:03}"),
            image: Image::from_grayscale(plane)?,
            box_annotation: b,
            reference_mask: Some(mask),
        });
    }
    Ok(samples)
}

// ---------------------------------------------------------------------------
// Synthetic scenes

/// Parameters of the synthetic ellipse dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub count: usize,
    pub size: (usize, usize),
    pub seed: u64,
    /// Peak-to-peak amplitude of the additive pixel noise.
    pub noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { count: 32, size: (64, 64), seed: 0, noise: 8.0 }
    }
}

/// Generate bright rotated-ellipse scenes on dark backgrounds. Each sample's
/// box is the tight box of its reference mask. Sample `i` depends only on
/// `(seed, i)`, so changing the count leaves earlier samples untouched.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<Sample>> {
    let (h, w) = spec.size;
    if h < 32 || w < 32 {
        return Err(Error::Config("synthetic scenes need at least 32x32 pixels".into()));
    }
    let extent = h.min(w) as f64;
    (0..spec.count)
        .map(|i| {
            let mut rng = named_stream(spec.seed, &format!("synthetic/{i}"));
            let bg = rng.gen_range(20.0..60.0);
            let fg = rng.gen_range(180.0..235.0);
            let cy = rng.gen_range(0.375 * h as f64..0.625 * h as f64);
            let cx = rng.gen_range(0.375 * w as f64..0.625 * w as f64);
            let a = rng.gen_range(0.125 * extent..0.3125 * extent);
            let b = rng.gen_range(0.125 * extent..0.3125 * extent);
            let theta = rng.gen_range(0.0..std::f64::consts::PI);
            let (sin, cos) = theta.sin_cos();
            let mut img = Array2::from_elem((h, w), bg);
            let mut mask = Array2::<u8>::zeros((h, w));
            for y in 0..h {
                for x in 0..w {
                    let dy = y as f64 - cy;
                    let dx = x as f64 - cx;
                    let u = (dx * cos + dy * sin) / a;
                    let v = (-dx * sin + dy * cos) / b;
                    if u * u + v * v <= 1.0 {
                        img[[y, x]] = fg;
                        mask[[y, x]] = 1;
                    }
                }
            }
            if spec.noise > 0.0 {
                for v in img.iter_mut() {
                    *v = (*v + rng.gen_range(-0.5 * spec.noise..0.5 * spec.noise))
                        .clamp(0.0, 255.0);
                }
            }
            let reference = BinaryMask::new(mask)?;
            let bbox = box_from_mask(&reference)?;
            Ok(Sample {
                id: format!("syn-{i:03}"),
                image: Image::from_grayscale(img)?,
                box_annotation: bbox,
                reference_mask: Some(reference),
            })
        })
        .collect()
}

/// Deterministically assign splits by fraction: `train_frac` then `val_frac`
/// of a shuffled order, remainder test.
pub fn assign_splits(count: usize, train_frac: f64, val_frac: f64, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..count).collect();
    let mut rng = named_stream(seed, "splits");
    order.shuffle(&mut rng);
    let n_train = (count as f64 * train_frac).floor() as usize;
    let n_val = (count as f64 * val_frac).floor() as usize;
    let mut splits = vec![Split::Test; count];
    for (rank, &idx) in order.iter().enumerate() {
        splits[idx] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    splits
}

/// Content fingerprint of a sample list (ids, image hashes, boxes, reference
/// masks) — a quick way to assert two pipelines produced identical data.
pub fn dataset_fingerprint(samples: &[Sample]) -> u64 {
    let mut hash = FNV_OFFSET;
    for s in samples {
        hash = fnv1a64_extend(hash, s.id.as_bytes());
        hash = fnv1a64_extend(hash, &s.image.content_hash().to_le_bytes());
        let b = &s.box_annotation;
        for c in [b.x_min, b.y_min, b.x_max, b.y_max] {
            hash = fnv1a64_extend(hash, &(c as u64).to_le_bytes());
        }
        if let Some(m) = &s.reference_mask {
            hash = fnv1a64_extend(hash, m.values().as_slice().expect("contiguous"));
        }
    }
    hash
}
