//! On-disk embedding cache.
//!
//! The image encoder is frozen, so each image's embedding is computed once
//! and reused across every epoch, trial and run. A cache directory holds one
//! binary record per sample plus a JSON manifest; records carry the source
//! image's content hash (staleness detection) and a payload checksum
//! (corruption detection).
//!
//! Record layout (little-endian):
//! `magic "BPE1" | kind u8 | id_len u16 | id | dtype u8 (0 = f32) | ndim u8 |
//!  dims u32 x ndim | source_hash u64 | payload_checksum u64 | payload f32 x n`

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::domain::{EmbeddingTensor, Image};
use crate::error::{Error, Result};
use crate::util::{fnv1a64, round_f32};

use super::Backbone;

const MAGIC: &[u8; 4] = b"BPE1";

/// Record payload kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordKind {
    Embedding = 0,
    Mask = 1,
    Vector = 2,
}

impl RecordKind {
    fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Self::Embedding),
            1 => Ok(Self::Mask),
            2 => Ok(Self::Vector),
            other => Err(Error::Corrupt(format!("unknown record kind {other}"))),
        }
    }
}

/// A parsed tensor record.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub kind: RecordKind,
    pub id: String,
    pub dims: Vec<usize>,
    pub source_hash: u64,
    /// f64 values exactly equal to the stored f32 payload.
    pub data: Vec<f64>,
}

/// Serialize a tensor record. Values are stored as f32; callers that need a
/// lossless round trip must pass f32-representable values (see
/// [`crate::util::round_f32`]).
pub fn write_record(path: &Path, record: &TensorRecord) -> Result<()> {
    let mut payload = Vec::with_capacity(record.data.len() * 4);
    for &v in &record.data {
        payload.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let checksum = fnv1a64(&payload);
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.push(record.kind as u8);
    let id_bytes = record.id.as_bytes();
    if id_bytes.len() > u16::MAX as usize {
        return Err(Error::Corrupt("record id too long".into()));
    }
    buf.extend_from_slice(&(id_bytes.len() as u16).to_le_bytes());
    buf.extend_from_slice(id_bytes);
    buf.push(0); // dtype f32
    buf.push(record.dims.len() as u8);
    for &d in &record.dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    buf.extend_from_slice(&record.source_hash.to_le_bytes());
    buf.extend_from_slice(&checksum.to_le_bytes());
    buf.extend_from_slice(&payload);
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Read and validate a tensor record.
pub fn read_record(path: &Path) -> Result<TensorRecord> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let fail = |msg: &str| Error::Corrupt(format!("{}: {msg}", path.display()));
    let mut off = 0usize;
    let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
        if *off + n > bytes.len() {
            return Err(fail("truncated record"));
        }
        let s = &bytes[*off..*off + n];
        *off += n;
        Ok(s)
    };
    if take(&mut off, 4)? != MAGIC {
        return Err(fail("bad magic"));
    }
    let kind = RecordKind::from_u8(take(&mut off, 1)?[0])?;
    let id_len = u16::from_le_bytes(take(&mut off, 2)?.try_into().unwrap()) as usize;
    let id = String::from_utf8(take(&mut off, id_len)?.to_vec())
        .map_err(|_| fail("record id is not utf-8"))?;
    let dtype = take(&mut off, 1)?[0];
    if dtype != 0 {
        return Err(fail("unsupported dtype"));
    }
    let ndim = take(&mut off, 1)?[0] as usize;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize);
    }
    let source_hash = u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap());
    let checksum = u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap());
    let n: usize = dims.iter().product();
    let payload = take(&mut off, n * 4)?;
    if off != bytes.len() {
        return Err(fail("trailing bytes"));
    }
    if fnv1a64(payload) != checksum {
        return Err(fail("payload checksum mismatch"));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(TensorRecord { kind, id, dims, source_hash, data })
}

/// One cached sample in the manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub file: String,
    pub image_hash: u64,
    pub shape: (usize, usize, usize),
}

/// The cache directory's index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheManifest {
    /// Name of the backbone the records were computed with.
    pub backbone: String,
    pub records: BTreeMap<String, CacheEntry>,
}

/// A directory of per-sample embedding records for one backbone.
#[derive(Debug)]
pub struct EmbeddingCache {
    root: PathBuf,
    manifest: CacheManifest,
}

impl EmbeddingCache {
    /// Open (or initialize) a cache rooted at `root` for the given backbone.
    /// A manifest written by a different backbone is stale as a whole.
    pub fn open(root: &Path, backbone_name: &str) -> Result<Self> {
        fs::create_dir_all(root)?;
        let manifest_path = root.join("cache.json");
        let manifest = if manifest_path.exists() {
            let m: CacheManifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
            if m.backbone != backbone_name {
                return Err(Error::StaleCache(format!(
                    "cache at {} was built with backbone '{}', expected '{}'",
                    root.display(),
                    m.backbone,
                    backbone_name
                )));
            }
            m
        } else {
            CacheManifest { backbone: backbone_name.to_string(), records: BTreeMap::new() }
        };
        Ok(Self { root: root.to_path_buf(), manifest })
    }

    pub fn manifest(&self) -> &CacheManifest {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.manifest.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.records.is_empty()
    }

    fn save_manifest(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(self.root.join("cache.json"), text)?;
        Ok(())
    }

    /// Load a cached embedding, verifying the stored image hash against the
    /// live image and the payload checksum against the record. Returns
    /// `Ok(None)` when the sample has never been cached.
    pub fn get(&self, sample_id: &str, image: &Image) -> Result<Option<EmbeddingTensor>> {
        let Some(entry) = self.manifest.records.get(sample_id) else {
            return Ok(None);
        };
        let live_hash = image.content_hash();
        if entry.image_hash != live_hash {
            return Err(Error::StaleCache(format!(
                "sample '{sample_id}': cached image hash {:#x} != live image hash {live_hash:#x}",
                entry.image_hash
            )));
        }
        let record = read_record(&self.root.join(&entry.file))?;
        if record.id != sample_id || record.source_hash != entry.image_hash {
            return Err(Error::StaleCache(format!(
                "sample '{sample_id}': record header does not match manifest entry"
            )));
        }
        let (c, h, w) = entry.shape;
        if record.dims != [c, h, w] {
            return Err(Error::Corrupt(format!(
                "sample '{sample_id}': record shape {:?} != manifest shape {:?}",
                record.dims, entry.shape
            )));
        }
        let arr = Array3::from_shape_vec((c, h, w), record.data)
            .map_err(|e| Error::Corrupt(format!("sample '{sample_id}': {e}")))?;
        Ok(Some(EmbeddingTensor::new(arr)))
    }

    /// Write one embedding record and update the manifest.
    pub fn put(&mut self, sample_id: &str, image: &Image, z: &EmbeddingTensor) -> Result<()> {
        let file = format!("{}.emb", crate::util::path_safe_id(sample_id));
        let record = TensorRecord {
            kind: RecordKind::Embedding,
            id: sample_id.to_string(),
            dims: vec![z.dim().0, z.dim().1, z.dim().2],
            source_hash: image.content_hash(),
            data: z.values().iter().copied().map(round_f32).collect(),
        };
        write_record(&self.root.join(&file), &record)?;
        self.manifest.records.insert(
            sample_id.to_string(),
            CacheEntry { file, image_hash: record.source_hash, shape: z.dim() },
        );
        self.save_manifest()
    }

    /// Serve from disk when present and valid, otherwise encode and cache.
    /// The boolean is true on a cache hit.
    pub fn get_or_compute(
        &mut self,
        backbone: &dyn Backbone,
        sample_id: &str,
        image: &Image,
    ) -> Result<(EmbeddingTensor, bool)> {
        if let Some(z) = self.get(sample_id, image)? {
            return Ok((z, true));
        }
        let z = backbone.encode_image(image)?;
        self.put(sample_id, image, &z)?;
        Ok((z, false))
    }
}

/// Summary of one precompute pass.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrecomputeReport {
    pub computed: usize,
    pub reused: usize,
    pub total_payload_bytes: u64,
}

/// Encode-and-cache every sample. Already-valid records are reused, so the
/// pass is idempotent; a stale or corrupt record is an error rather than a
/// silent recompute.
pub fn precompute_embeddings<'a>(
    backbone: &dyn Backbone,
    samples: impl IntoIterator<Item = (&'a str, &'a Image)>,
    cache_root: &Path,
) -> Result<PrecomputeReport> {
    let mut cache = EmbeddingCache::open(cache_root, &backbone.descriptor().name)?;
    let mut report = PrecomputeReport { computed: 0, reused: 0, total_payload_bytes: 0 };
    for (id, image) in samples {
        let (z, hit) = cache.get_or_compute(backbone, id, image)?;
        if hit {
            report.reused += 1;
        } else {
            report.computed += 1;
        }
        let (c, h, w) = z.dim();
        report.total_payload_bytes += (c * h * w * 4) as u64;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::toy::{ToyBackbone, ToyBackboneConfig};
    use crate::util::named_stream;
    use ndarray::Array2;
    use rand::Rng;

    fn random_image(seed: u64) -> Image {
        let mut rng = named_stream(seed, "cache-test");
        Image::from_grayscale(Array2::from_shape_fn((64, 64), |_| rng.gen_range(0.0..255.0)))
            .unwrap()
    }

    #[test]
    fn record_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.emb");
        let record = TensorRecord {
            kind: RecordKind::Embedding,
            id: "sample-7".into(),
            dims: vec![2, 3, 4],
            source_hash: 0xdead_beef,
            data: (0..24).map(|i| round_f32(i as f64 * 0.37 - 2.0)).collect(),
        };
        write_record(&path, &record).unwrap();
        let back = read_record(&path).unwrap();
        assert_eq!(back, record);
    }

    #[test]
    fn corrupted_payload_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.emb");
        let record = TensorRecord {
            kind: RecordKind::Embedding,
            id: "s".into(),
            dims: vec![4],
            source_hash: 1,
            data: vec![1.0, 2.0, 3.0, 4.0],
        };
        write_record(&path, &record).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        let err = read_record(&path).unwrap_err();
        assert!(matches!(err, Error::Corrupt(_)), "{err}");
    }

    #[test]
    fn cache_serves_cached_embeddings_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let bb = ToyBackbone::new(ToyBackboneConfig::default()).unwrap();
        let img = random_image(1);
        let mut cache = EmbeddingCache::open(dir.path(), &bb.descriptor().name).unwrap();
        let (z1, hit1) = cache.get_or_compute(&bb, "a", &img).unwrap();
        assert!(!hit1);
        let (z2, hit2) = cache.get_or_compute(&bb, "a", &img).unwrap();
        assert!(hit2);
        assert_eq!(z1, z2);
        // Reopen from disk: still identical.
        let cache2 = EmbeddingCache::open(dir.path(), &bb.descriptor().name).unwrap();
        let z3 = cache2.get("a", &img).unwrap().unwrap();
        assert_eq!(z1, z3);
    }

    #[test]
    fn changed_image_is_a_stale_cache_error() {
        let dir = tempfile::tempdir().unwrap();
        let bb = ToyBackbone::new(ToyBackboneConfig::default()).unwrap();
        let mut cache = EmbeddingCache::open(dir.path(), &bb.descriptor().name).unwrap();
        cache.get_or_compute(&bb, "a", &random_image(1)).unwrap();
        let err = cache.get("a", &random_image(2)).unwrap_err();
        assert!(matches!(err, Error::StaleCache(_)), "{err}");
        let msg = err.to_string();
        assert!(msg.contains("'a'"), "error should name the sample: {msg}");
    }

    #[test]
    fn different_backbone_name_invalidates_the_cache() {
        let dir = tempfile::tempdir().unwrap();
        let bb = ToyBackbone::new(ToyBackboneConfig::default()).unwrap();
        let mut cache = EmbeddingCache::open(dir.path(), &bb.descriptor().name).unwrap();
        cache.get_or_compute(&bb, "a", &random_image(1)).unwrap();
        drop(cache);
        let err = EmbeddingCache::open(dir.path(), "other-backbone").unwrap_err();
        assert!(matches!(err, Error::StaleCache(_)), "{err}");
    }

    #[test]
    fn precompute_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let bb = ToyBackbone::new(ToyBackboneConfig::default()).unwrap();
        let images: Vec<(String, Image)> =
            (0..5).map(|i| (format!("s{i}"), random_image(i))).collect();
        let pairs = || images.iter().map(|(id, im)| (id.as_str(), im));
        let first = precompute_embeddings(&bb, pairs(), dir.path()).unwrap();
        assert_eq!((first.computed, first.reused), (5, 0));
        let second = precompute_embeddings(&bb, pairs(), dir.path()).unwrap();
        assert_eq!((second.computed, second.reused), (0, 5));
    }
}
