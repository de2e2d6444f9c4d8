//! Minimal dense-tensor neural-net kernels with hand-written backward passes:
//! 2D convolution, ReLU, nearest-neighbour and bilinear resampling.
//!
//! Everything runs in f64 on `ndarray` containers, single-threaded and
//! allocation-straightforward, which keeps training bit-reproducible. The
//! backward passes are exercised against central finite differences by the
//! generator and backbone test suites.

use ndarray::{Array1, Array2, Array3, Array4};

/// `out = floor((in + 2*pad - k) / stride) + 1`
pub fn conv_out_len(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Plain 2D convolution over a channel-first `(C_in, H, W)` tensor with an
/// `(C_out, C_in, KH, KW)` kernel and per-output-channel bias.
pub fn conv2d_forward(
    x: &Array3<f64>,
    w: &Array4<f64>,
    b: &Array1<f64>,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let (c_in, h, wdt) = x.dim();
    let (c_out, c_in_w, kh, kw) = w.dim();
    assert_eq!(c_in, c_in_w, "conv input channels");
    assert_eq!(b.len(), c_out, "conv bias length");
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(wdt, kw, stride, pad);
    let mut out = Array3::zeros((c_out, oh, ow));
    for co in 0..c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b[co];
                for ci in 0..c_in {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= wdt as isize {
                                continue;
                            }
                            acc += x[[ci, iy as usize, ix as usize]] * w[[co, ci, ky, kx]];
                        }
                    }
                }
                out[[co, oy, ox]] = acc;
            }
        }
    }
    out
}

/// Backward pass of [`conv2d_forward`]: given upstream `gy` over the output,
/// produce gradients for the input, the kernel, and the bias.
pub fn conv2d_backward(
    x: &Array3<f64>,
    w: &Array4<f64>,
    stride: usize,
    pad: usize,
    gy: &Array3<f64>,
) -> (Array3<f64>, Array4<f64>, Array1<f64>) {
    let (c_in, h, wdt) = x.dim();
    let (c_out, _, kh, kw) = w.dim();
    let (gc, oh, ow) = gy.dim();
    assert_eq!(gc, c_out, "conv upstream channels");
    let mut gx = Array3::zeros((c_in, h, wdt));
    let mut gw = Array4::zeros(w.dim());
    let mut gb = Array1::zeros(c_out);
    for co in 0..c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = gy[[co, oy, ox]];
                if g == 0.0 {
                    continue;
                }
                gb[co] += g;
                for ci in 0..c_in {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= wdt as isize {
                                continue;
                            }
                            let iy = iy as usize;
                            let ix = ix as usize;
                            gw[[co, ci, ky, kx]] += g * x[[ci, iy, ix]];
                            gx[[ci, iy, ix]] += g * w[[co, ci, ky, kx]];
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

pub fn relu_forward(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Gradient through ReLU given the *pre-activation* values.
pub fn relu_backward(pre: &Array3<f64>, gy: &Array3<f64>) -> Array3<f64> {
    let mut gx = gy.clone();
    gx.zip_mut_with(pre, |g, &p| {
        if p <= 0.0 {
            *g = 0.0;
        }
    });
    gx
}

/// Nearest-neighbour x2 upsampling of the trailing two axes.
pub fn upsample_nearest2x_forward(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, h * 2, w * 2), |(ci, y, xx)| x[[ci, y / 2, xx / 2]])
}

/// Backward of [`upsample_nearest2x_forward`]: each source cell accumulates
/// its 2x2 replica block.
pub fn upsample_nearest2x_backward(gy: &Array3<f64>) -> Array3<f64> {
    let (c, h2, w2) = gy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gx = Array3::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h2 {
            for x in 0..w2 {
                gx[[ci, y / 2, x / 2]] += gy[[ci, y, x]];
            }
        }
    }
    gx
}

/// Source coordinate and interpolation weights for one output index under
/// half-pixel-centre ("align corners false") bilinear resampling.
#[inline]
fn bilinear_taps(out_idx: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = (out_idx as f64 + 0.5) * scale - 0.5;
    let i0f = src.floor();
    let frac = src - i0f;
    let i0 = (i0f.max(0.0) as usize).min(in_len - 1);
    let i1 = ((i0f + 1.0).max(0.0) as usize).min(in_len - 1);
    (i0, i1, frac.clamp(0.0, 1.0))
}

/// Bilinear upsampling of a plane with half-pixel-centre sampling. Exactly
/// linear in the source, so its adjoint below is its true gradient; it also
/// commutes with flips and quarter rotations on square grids, which the
/// consistency term relies on.
pub fn bilinear_upsample_plane(src: &Array2<f64>, out_dim: (usize, usize)) -> Array2<f64> {
    let (h_in, w_in) = src.dim();
    let (h_out, w_out) = out_dim;
    let mut out = Array2::zeros(out_dim);
    for oy in 0..h_out {
        let (y0, y1, fy) = bilinear_taps(oy, h_in, h_out);
        for ox in 0..w_out {
            let (x0, x1, fx) = bilinear_taps(ox, w_in, w_out);
            out[[oy, ox]] = (1.0 - fy) * (1.0 - fx) * src[[y0, x0]]
                + (1.0 - fy) * fx * src[[y0, x1]]
                + fy * (1.0 - fx) * src[[y1, x0]]
                + fy * fx * src[[y1, x1]];
        }
    }
    out
}

/// Adjoint (transpose) of [`bilinear_upsample_plane`]: scatters upstream
/// gradients back onto the source grid with the same weights.
pub fn bilinear_upsample_adjoint_plane(gy: &Array2<f64>, src_dim: (usize, usize)) -> Array2<f64> {
    let (h_in, w_in) = src_dim;
    let (h_out, w_out) = gy.dim();
    let mut gx = Array2::zeros(src_dim);
    for oy in 0..h_out {
        let (y0, y1, fy) = bilinear_taps(oy, h_in, h_out);
        for ox in 0..w_out {
            let (x0, x1, fx) = bilinear_taps(ox, w_in, w_out);
            let g = gy[[oy, ox]];
            gx[[y0, x0]] += (1.0 - fy) * (1.0 - fx) * g;
            gx[[y0, x1]] += (1.0 - fy) * fx * g;
            gx[[y1, x0]] += fy * (1.0 - fx) * g;
            gx[[y1, x1]] += fy * fx * g;
        }
    }
    gx
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
