//! File-based backbone adapter.
//!
//! A production-scale promptable backbone typically runs in a separate
//! process (often a separate language) from this trainer. The contract
//! between the two is a directory: the owner of the real model exports
//! embeddings, pseudo-label masks and its default sparse prompt embedding;
//! [`FileBackbone`] then serves them through the [`Backbone`] trait. The
//! trainer never needs the model's weights — the encoder is frozen and the
//! pseudo-labels are fixed before training starts, so files are a complete
//! interface.
//!
//! [`export_backbone`] writes the same layout from any in-process
//! [`Backbone`], which is how the round trip is tested.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::domain::{BinaryMask, BoxAnnotation, EmbeddingTensor, Image, PromptEmbedding};
use crate::error::{Error, Result};
use crate::util::{fnv1a64, round_f32};

use super::cache::{read_record, write_record, RecordKind, TensorRecord};
use super::{Backbone, BackboneDescriptor};

const EXPORT_MANIFEST: &str = "export.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EmbeddingRef {
    file: String,
    sample_id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ExportManifest {
    descriptor: BackboneDescriptor,
    /// Default sparse prompt embedding, length `embedding_channels`.
    sparse: Vec<f64>,
    /// Image content hash (hex) -> embedding record.
    embeddings: BTreeMap<String, EmbeddingRef>,
    /// "{image hash hex}/{x_min},{y_min},{x_max},{y_max}" -> mask record file.
    pseudo_labels: BTreeMap<String, String>,
}

fn image_key(image: &Image) -> String {
    format!("{:016x}", image.content_hash())
}

fn pseudo_key(image: &Image, b: &BoxAnnotation) -> String {
    format!("{}/{},{},{},{}", image_key(image), b.x_min, b.y_min, b.x_max, b.y_max)
}

/// One sample to export: its image and the boxes whose pseudo-labels the
/// trainer will need.
pub struct ExportSample<'a> {
    pub id: &'a str,
    pub image: &'a Image,
    pub boxes: &'a [BoxAnnotation],
}

/// Write a backbone export directory: every sample's embedding, a
/// pseudo-label mask per (sample, box), and the manifest tying them together.
pub fn export_backbone(
    backbone: &dyn Backbone,
    samples: &[ExportSample<'_>],
    dir: &Path,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = ExportManifest {
        descriptor: backbone.descriptor().clone(),
        sparse: backbone
            .default_sparse_embedding()
            .iter()
            .copied()
            .map(round_f32)
            .collect(),
        embeddings: BTreeMap::new(),
        pseudo_labels: BTreeMap::new(),
    };
    for sample in samples {
        let hash = sample.image.content_hash();
        let key = image_key(sample.image);
        if !manifest.embeddings.contains_key(&key) {
            let z = backbone.encode_image(sample.image)?;
            let file = format!("{key}.emb");
            write_record(
                &dir.join(&file),
                &TensorRecord {
                    kind: RecordKind::Embedding,
                    id: sample.id.to_string(),
                    dims: vec![z.dim().0, z.dim().1, z.dim().2],
                    source_hash: hash,
                    data: z.values().iter().copied().map(round_f32).collect(),
                },
            )?;
            manifest
                .embeddings
                .insert(key.clone(), EmbeddingRef { file, sample_id: sample.id.to_string() });
        }
        for (bi, b) in sample.boxes.iter().enumerate() {
            let pkey = pseudo_key(sample.image, b);
            if manifest.pseudo_labels.contains_key(&pkey) {
                continue;
            }
            let mask = backbone.prompted_pseudo_label(sample.image, b)?;
            let (h, w) = mask.size();
            let file = format!("{key}.box{bi}.msk");
            write_record(
                &dir.join(&file),
                &TensorRecord {
                    kind: RecordKind::Mask,
                    id: sample.id.to_string(),
                    dims: vec![h, w],
                    source_hash: hash,
                    data: (0..h)
                        .flat_map(|y| (0..w).map(move |x| (y, x)))
                        .map(|(y, x)| mask.get(y, x) as f64)
                        .collect(),
                },
            )?;
            manifest.pseudo_labels.insert(pkey, file);
        }
    }
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(dir.join(EXPORT_MANIFEST), text)?;
    Ok(())
}

/// A backbone backed entirely by an export directory.
///
/// `encode_image` and `prompted_pseudo_label` are lookups by image content
/// hash; the prompt encoder and mask decoder are not available and return
/// [`Error::Unsupported`], which is fine for training because the loss only
/// consumes embeddings and fixed pseudo-labels.
pub struct FileBackbone {
    dir: PathBuf,
    manifest: ExportManifest,
    manifest_hash: u64,
}

impl FileBackbone {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(EXPORT_MANIFEST);
        let bytes = fs::read(&path)
            .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        let manifest: ExportManifest = serde_json::from_slice(&bytes)?;
        let c = manifest.descriptor.embedding_channels;
        if manifest.sparse.len() != c {
            return Err(Error::Manifest(format!(
                "sparse embedding length {} != embedding_channels {c}",
                manifest.sparse.len()
            )));
        }
        Ok(Self { dir: dir.to_path_buf(), manifest, manifest_hash: fnv1a64(&bytes) })
    }

    fn load(&self, file: &str, expect_kind: RecordKind, expect_hash: u64) -> Result<TensorRecord> {
        let record = read_record(&self.dir.join(file))?;
        if record.kind != expect_kind {
            return Err(Error::Corrupt(format!("{file}: unexpected record kind")));
        }
        if record.source_hash != expect_hash {
            return Err(Error::StaleCache(format!(
                "{file}: record was exported from a different image"
            )));
        }
        Ok(record)
    }
}

impl Backbone for FileBackbone {
    fn descriptor(&self) -> &BackboneDescriptor {
        &self.manifest.descriptor
    }

    fn encode_image(&self, image: &Image) -> Result<EmbeddingTensor> {
        let key = image_key(image);
        let entry = self.manifest.embeddings.get(&key).ok_or_else(|| {
            Error::Manifest(format!("no exported embedding for image {key}"))
        })?;
        let record = self.load(&entry.file, RecordKind::Embedding, image.content_hash())?;
        if record.dims.len() != 3 {
            return Err(Error::Corrupt(format!("{}: expected a 3-d embedding", entry.file)));
        }
        let arr = Array3::from_shape_vec(
            (record.dims[0], record.dims[1], record.dims[2]),
            record.data,
        )
        .map_err(|e| Error::Corrupt(format!("{}: {e}", entry.file)))?;
        Ok(EmbeddingTensor::new(arr))
    }

    fn encode_box_prompt(&self, _b: &BoxAnnotation) -> Result<PromptEmbedding> {
        Err(Error::Unsupported(
            "file backbone does not expose the prompt encoder; use exported pseudo-labels".into(),
        ))
    }

    fn default_sparse_embedding(&self) -> Array1<f64> {
        Array1::from_vec(self.manifest.sparse.clone())
    }

    fn decode(&self, _z: &EmbeddingTensor, _prompt: &PromptEmbedding) -> Result<crate::domain::ProbabilityMap> {
        Err(Error::Unsupported(
            "file backbone does not expose the mask decoder; use exported pseudo-labels".into(),
        ))
    }

    fn prompted_pseudo_label(&self, image: &Image, b: &BoxAnnotation) -> Result<BinaryMask> {
        let key = pseudo_key(image, b);
        let file = self.manifest.pseudo_labels.get(&key).ok_or_else(|| {
            Error::Manifest(format!("no exported pseudo-label for {key}"))
        })?;
        let record = self.load(file, RecordKind::Mask, image.content_hash())?;
        if record.dims.len() != 2 {
            return Err(Error::Corrupt(format!("{file}: expected a 2-d mask")));
        }
        let (h, w) = (record.dims[0], record.dims[1]);
        let mut arr = Array2::<u8>::zeros((h, w));
        for (i, &v) in record.data.iter().enumerate() {
            if v != 0.0 && v != 1.0 {
                return Err(Error::Corrupt(format!("{file}: mask value {v} is not binary")));
            }
            arr[(i / w, i % w)] = v as u8;
        }
        BinaryMask::new(arr)
    }

    fn parameter_checksum(&self) -> u64 {
        self.manifest_hash
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::toy::{ToyBackbone, ToyBackboneConfig};
    use crate::util::named_stream;
    use rand::Rng;

    fn random_image(seed: u64) -> Image {
        let mut rng = named_stream(seed, "external-test");
        Image::from_grayscale(Array2::from_shape_fn((64, 64), |_| rng.gen_range(0.0..255.0)))
            .unwrap()
    }

    fn export_toy(dir: &Path) -> (ToyBackbone, Vec<Image>, Vec<BoxAnnotation>) {
        let bb = ToyBackbone::new(ToyBackboneConfig::default()).unwrap();
        let images: Vec<Image> = (0..2).map(random_image).collect();
        let boxes = vec![
            BoxAnnotation::new(10, 8, 50, 40).unwrap(),
            BoxAnnotation::new(4, 20, 30, 60).unwrap(),
        ];
        let samples: Vec<ExportSample<'_>> = images
            .iter()
            .enumerate()
            .map(|(i, image)| ExportSample {
                id: if i == 0 { "s0" } else { "s1" },
                image,
                boxes: std::slice::from_ref(&boxes[i]),
            })
            .collect();
        export_backbone(&bb, &samples, dir).unwrap();
        (bb, images, boxes)
    }

    #[test]
    fn export_round_trips_embeddings_and_pseudo_labels() {
        let dir = tempfile::tempdir().unwrap();
        let (bb, images, boxes) = export_toy(dir.path());
        let fb = FileBackbone::open(dir.path()).unwrap();
        assert_eq!(fb.descriptor(), bb.descriptor());
        for (i, image) in images.iter().enumerate() {
            let direct = bb.encode_image(image).unwrap();
            let via_file = fb.encode_image(image).unwrap();
            assert_eq!(direct, via_file, "embedding {i} should round trip bit-exactly");
            let direct_mask = bb.prompted_pseudo_label(image, &boxes[i]).unwrap();
            let via_mask = fb.prompted_pseudo_label(image, &boxes[i]).unwrap();
            assert_eq!(direct_mask, via_mask);
        }
        assert_eq!(fb.default_sparse_embedding(), bb.default_sparse_embedding());
    }

    #[test]
    fn prompt_encoder_and_decoder_are_unsupported() {
        let dir = tempfile::tempdir().unwrap();
        let (_, _images, boxes) = export_toy(dir.path());
        let fb = FileBackbone::open(dir.path()).unwrap();
        let err = fb.encode_box_prompt(&boxes[0]).unwrap_err();
        assert!(matches!(err, Error::Unsupported(_)), "{err}");
    }

    #[test]
    fn unknown_image_is_a_manifest_error() {
        let dir = tempfile::tempdir().unwrap();
        let _ = export_toy(dir.path());
        let fb = FileBackbone::open(dir.path()).unwrap();
        let other = random_image(99);
        let err = fb.encode_image(&other).unwrap_err();
        assert!(matches!(err, Error::Manifest(_)), "{err}");
    }

    #[test]
    fn unknown_box_is_a_manifest_error() {
        let dir = tempfile::tempdir().unwrap();
        let (_, images, _) = export_toy(dir.path());
        let fb = FileBackbone::open(dir.path()).unwrap();
        let other = BoxAnnotation::new(0, 0, 5, 5).unwrap();
        let err = fb.prompted_pseudo_label(&images[0], &other).unwrap_err();
        assert!(matches!(err, Error::Manifest(_)), "{err}");
    }
}
