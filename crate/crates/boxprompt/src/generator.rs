//! The trainable prompt generator.
//!
//! The generator maps a full-resolution image to a dense prompt embedding on
//! the backbone's grid; the frozen decoder then turns that embedding (plus
//! the image's cached embedding) into a mask. At inference time this replaces
//! the box prompt entirely — the network has learned to produce its own
//! prompt — so boxes are only needed during training.
//!
//! Architecture: a plain convolutional encoder/decoder. Encoder blocks are
//! two 3x3 convolutions (the second strided) with ReLU; the stride sequence
//! is computed so the encoder reduces the image to `embedding_size / 2^U`,
//! after which `U` nearest-neighbor upsampling blocks (each followed by two
//! 3x3 convolutions) restore the embedding grid, and a final 1x1 convolution
//! emits `embedding_channels` channels, unactivated.
//!
//! Parameters live in one flat `Vec<f64>` described by per-tensor layout
//! specs, which keeps the optimizer and checkpoint code trivial. Weights are
//! kept f32-representable at all times (init and every update round through
//! f32) so checkpoints round-trip bit-exactly.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array3, Array4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::Image;
use crate::error::{Error, Result};
use crate::nn;
use crate::util::{fnv1a64, named_stream, round_f32};

/// Shape of the generator network. `encoder_widths` gives the output channel
/// count of each encoder block; decoder widths are derived by halving.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub input_size: (usize, usize),
    pub embedding_channels: usize,
    pub embedding_size: (usize, usize),
    pub encoder_widths: Vec<usize>,
    pub upsample_blocks: usize,
}

impl GeneratorConfig {
    /// Compact configuration for unit tests and the synthetic preset.
    pub fn desk() -> Self {
        Self {
            input_size: (64, 64),
            embedding_channels: 16,
            embedding_size: (4, 4),
            encoder_widths: vec![8, 16, 32],
            upsample_blocks: 2,
        }
    }

    /// Configuration sized for a production backbone (1024x1024 input,
    /// 64x64x256 embeddings).
    pub fn paper_scale() -> Self {
        Self {
            input_size: (1024, 1024),
            embedding_channels: 256,
            embedding_size: (64, 64),
            encoder_widths: vec![64, 128, 256, 512, 1024, 1024],
            upsample_blocks: 2,
        }
    }

    /// Total trainable parameter count, computed from the layout without
    /// allocating the network.
    pub fn parameter_count(&self) -> Result<usize> {
        Ok(plan(self)?.1)
    }

    pub fn fingerprint(&self) -> u64 {
        fnv1a64(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

/// Slice of the flat parameter buffer holding one named tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub offset: usize,
    pub dims: Vec<usize>,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
enum LayerOp {
    /// 3x3 or 1x1 convolution; padding is (k-1)/2, so spatial size divides by
    /// `stride` exactly.
    Conv { w: TensorSpec, b: TensorSpec, stride: usize, relu: bool },
    Upsample2x,
}

/// Factor `total` (a power of two) into `blocks` per-block strides, largest
/// first, e.g. 64 into 3 blocks -> [4, 4, 4]; 32 into 3 -> [4, 4, 2].
fn stride_sequence(total: usize, blocks: usize) -> Result<Vec<usize>> {
    if !total.is_power_of_two() {
        return Err(Error::Config(format!(
            "encoder must reduce by a power of two, got {total}"
        )));
    }
    let k = total.trailing_zeros() as usize;
    if blocks == 0 || k < blocks {
        return Err(Error::Config(format!(
            "cannot spread stride 2^{k} across {blocks} encoder blocks"
        )));
    }
    let base = k / blocks;
    let extra = k % blocks;
    Ok((0..blocks)
        .map(|i| 1usize << (base + usize::from(i < extra)))
        .collect())
}

/// Build the op list and total parameter count for a config.
fn plan(cfg: &GeneratorConfig) -> Result<(Vec<LayerOp>, usize)> {
    let (h, w) = cfg.input_size;
    let (he, we) = cfg.embedding_size;
    if h == 0 || w == 0 || he == 0 || we == 0 || cfg.embedding_channels == 0 {
        return Err(Error::Config("generator sizes must be positive".into()));
    }
    let up = 1usize << cfg.upsample_blocks;
    let check_axis = |full: usize, emb: usize| -> Result<usize> {
        let bottom_num = emb;
        if bottom_num % up != 0 {
            return Err(Error::Config(format!(
                "embedding extent {emb} is not divisible by 2^{}",
                cfg.upsample_blocks
            )));
        }
        let bottom = bottom_num / up;
        if full % bottom != 0 {
            return Err(Error::Config(format!(
                "input extent {full} is not a multiple of the encoder output {bottom}"
            )));
        }
        Ok(full / bottom)
    };
    let factor_h = check_axis(h, he)?;
    let factor_w = check_axis(w, we)?;
    if factor_h != factor_w {
        return Err(Error::Config(format!(
            "input and embedding aspect ratios differ ({factor_h} vs {factor_w})"
        )));
    }
    let strides = stride_sequence(factor_h, cfg.encoder_widths.len())?;

    let mut ops = Vec::new();
    let mut offset = 0usize;
    let mut conv = |name: String, c_in: usize, c_out: usize, k: usize, stride: usize, relu: bool| {
        let w = TensorSpec { name: format!("{name}.w"), offset, dims: vec![c_out, c_in, k, k] };
        offset += w.len();
        let b = TensorSpec { name: format!("{name}.b"), offset, dims: vec![c_out] };
        offset += b.len();
        LayerOp::Conv { w, b, stride, relu }
    };

    let mut width = 3; // rgb input
    for (i, (&next, &s)) in cfg.encoder_widths.iter().zip(&strides).enumerate() {
        ops.push(conv(format!("enc{i}.a"), width, width, 3, 1, true));
        ops.push(conv(format!("enc{i}.b"), width, next, 3, s, true));
        width = next;
    }
    for i in 0..cfg.upsample_blocks {
        ops.push(LayerOp::Upsample2x);
        let next = (width / 2).max(1);
        ops.push(conv(format!("dec{i}.a"), width, next, 3, 1, true));
        ops.push(conv(format!("dec{i}.b"), next, next, 3, 1, true));
        width = next;
    }
    ops.push(conv("head".into(), width, cfg.embedding_channels, 1, 1, false));
    Ok((ops, offset))
}

/// Activations recorded during a forward pass, consumed by [`Generator::backward`].
pub struct ForwardTrace {
    /// Input to each op.
    inputs: Vec<Array3<f64>>,
    /// Pre-activation output for ReLU convolutions, `None` otherwise.
    pre: Vec<Option<Array3<f64>>>,
}

#[derive(Debug)]
pub struct Generator {
    config: GeneratorConfig,
    ops: Vec<LayerOp>,
    params: Vec<f64>,
}

const WEIGHTS_MAGIC: &[u8; 4] = b"BPGW";

impl Generator {
    /// Build and He-initialize a generator. Initialization draws from the
    /// named substream `"generator/init"` of `seed` and rounds through f32.
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        let (ops, count) = plan(&config)?;
        let mut params = vec![0.0f64; count];
        let mut rng = named_stream(seed, "generator/init");
        for op in &ops {
            if let LayerOp::Conv { w, .. } = op {
                let fan_in: usize = w.dims[1] * w.dims[2] * w.dims[3];
                let bound = (6.0 / fan_in as f64).sqrt();
                for p in &mut params[w.offset..w.offset + w.len()] {
                    *p = round_f32(rng.gen_range(-bound..bound));
                }
                // biases stay zero
            }
        }
        Ok(Self { config, ops, params })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable access for the optimizer. Callers must keep values
    /// f32-representable (round updates through f32).
    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// FNV-1a over the f32 bit patterns of all parameters, in layout order.
    pub fn checksum(&self) -> u64 {
        crate::util::checksum_f32_of(self.params.iter().copied())
    }

    fn kernel(&self, spec: &TensorSpec) -> Array4<f64> {
        let d = &spec.dims;
        Array4::from_shape_vec(
            (d[0], d[1], d[2], d[3]),
            self.params[spec.offset..spec.offset + spec.len()].to_vec(),
        )
        .expect("layout spec matches buffer")
    }

    fn bias(&self, spec: &TensorSpec) -> Array1<f64> {
        Array1::from_vec(self.params[spec.offset..spec.offset + spec.len()].to_vec())
    }

    /// Run the network on an image, returning the dense prompt embedding
    /// `(embedding_channels, H_e, W_e)` and the trace needed for backward.
    pub fn forward(&self, image: &Image) -> Result<(Array3<f64>, ForwardTrace)> {
        if image.size() != self.config.input_size {
            return Err(Error::Shape(format!(
                "generator expects {:?} input, got {:?}",
                self.config.input_size,
                image.size()
            )));
        }
        let mut x = image.pixels().mapv(|v| v / 255.0);
        let mut trace = ForwardTrace { inputs: Vec::new(), pre: Vec::new() };
        for op in &self.ops {
            match op {
                LayerOp::Conv { w, b, stride, relu } => {
                    let weight = self.kernel(w);
                    let bias = self.bias(b);
                    let pad = (w.dims[2] - 1) / 2;
                    let z = nn::conv2d_forward(&x, &weight, &bias, *stride, pad);
                    trace.inputs.push(x);
                    if *relu {
                        let y = nn::relu_forward(&z);
                        trace.pre.push(Some(z));
                        x = y;
                    } else {
                        trace.pre.push(None);
                        x = z;
                    }
                }
                LayerOp::Upsample2x => {
                    let y = nn::upsample_nearest2x_forward(&x);
                    trace.inputs.push(x);
                    trace.pre.push(None);
                    x = y;
                }
            }
        }
        debug_assert_eq!(
            x.dim(),
            (self.config.embedding_channels, self.config.embedding_size.0, self.config.embedding_size.1)
        );
        Ok((x, trace))
    }

    /// Backpropagate a gradient w.r.t. the dense prompt embedding down to a
    /// gradient w.r.t. the flat parameter buffer.
    pub fn backward(&self, trace: &ForwardTrace, grad_out: &Array3<f64>) -> Vec<f64> {
        let mut grads = vec![0.0f64; self.params.len()];
        let mut gy = grad_out.clone();
        for (i, op) in self.ops.iter().enumerate().rev() {
            match op {
                LayerOp::Conv { w, b, stride, relu } => {
                    if *relu {
                        let pre = trace.pre[i].as_ref().expect("relu conv stores pre-activation");
                        gy = nn::relu_backward(pre, &gy);
                    }
                    let weight = self.kernel(w);
                    let pad = (w.dims[2] - 1) / 2;
                    let (gx, gw, gb) =
                        nn::conv2d_backward(&trace.inputs[i], &weight, *stride, pad, &gy);
                    grads[w.offset..w.offset + w.len()]
                        .iter_mut()
                        .zip(gw.iter())
                        .for_each(|(g, &v)| *g += v);
                    grads[b.offset..b.offset + b.len()]
                        .iter_mut()
                        .zip(gb.iter())
                        .for_each(|(g, &v)| *g += v);
                    gy = gx;
                }
                LayerOp::Upsample2x => {
                    gy = nn::upsample_nearest2x_backward(&gy);
                }
            }
        }
        grads
    }

    /// Write weights: magic, config fingerprint, a tensor manifest, then the
    /// parameters as little-endian f32 with a trailing checksum.
    pub fn save_weights(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(WEIGHTS_MAGIC);
        buf.extend_from_slice(&self.config.fingerprint().to_le_bytes());
        let specs: Vec<&TensorSpec> = self
            .ops
            .iter()
            .filter_map(|op| match op {
                LayerOp::Conv { w, b, .. } => Some([w, b]),
                LayerOp::Upsample2x => None,
            })
            .flatten()
            .collect();
        buf.extend_from_slice(&(specs.len() as u32).to_le_bytes());
        for spec in &specs {
            let name = spec.name.as_bytes();
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name);
            buf.push(spec.dims.len() as u8);
            for &d in &spec.dims {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
        let mut payload = Vec::with_capacity(self.params.len() * 4);
        for &p in &self.params {
            payload.extend_from_slice(&(p as f32).to_le_bytes());
        }
        buf.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        buf.extend_from_slice(&fnv1a64(&payload).to_le_bytes());
        buf.extend_from_slice(&payload);
        let mut f = fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    /// Load weights saved by [`Generator::save_weights`] into a generator of
    /// the same configuration.
    pub fn load_weights(config: GeneratorConfig, path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let fail = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));
        let mut off = 0usize;
        let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
            if *off + n > bytes.len() {
                return Err(fail("truncated checkpoint"));
            }
            let s = &bytes[*off..*off + n];
            *off += n;
            Ok(s)
        };
        if take(&mut off, 4)? != WEIGHTS_MAGIC {
            return Err(fail("bad magic"));
        }
        let fp = u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap());
        if fp != config.fingerprint() {
            return Err(Error::Checkpoint(format!(
                "{}: checkpoint was saved for a different generator configuration",
                path.display()
            )));
        }
        let (ops, count) = plan(&config)?;
        let ntensors = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
        let mut manifest = Vec::with_capacity(ntensors);
        for _ in 0..ntensors {
            let name_len = u16::from_le_bytes(take(&mut off, 2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut off, name_len)?.to_vec())
                .map_err(|_| fail("tensor name is not utf-8"))?;
            let ndim = take(&mut off, 1)?[0] as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize);
            }
            manifest.push((name, dims));
        }
        let expected: Vec<(String, Vec<usize>)> = ops
            .iter()
            .filter_map(|op| match op {
                LayerOp::Conv { w, b, .. } => Some([w, b]),
                LayerOp::Upsample2x => None,
            })
            .flatten()
            .map(|s| (s.name.clone(), s.dims.clone()))
            .collect();
        if manifest != expected {
            return Err(fail("tensor manifest does not match the planned layout"));
        }
        let stored = u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()) as usize;
        if stored != count {
            return Err(fail("parameter count mismatch"));
        }
        let checksum = u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap());
        let payload = take(&mut off, count * 4)?;
        if off != bytes.len() {
            return Err(fail("trailing bytes"));
        }
        if fnv1a64(payload) != checksum {
            return Err(fail("weight checksum mismatch"));
        }
        let params = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Ok(Self { config, ops, params })
    }
}
