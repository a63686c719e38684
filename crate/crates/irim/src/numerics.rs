//! Dense-tensor substrate: strided 2D convolutions, their adjoints, and
//! kernel gradients, generic over `f32`/`f64`.
//!
//! Tensors are `ndarray` arrays in NCHW layout; kernels are (out, in, kh, kw).
//! Convolution uses cross-correlation semantics. `conv2d_transpose` is the
//! exact adjoint of `conv2d` with the same kernel, stride and padding:
//! `<conv2d(x, k), y> == <x, conv2d_transpose(y, k)>`.

use crate::error::{IrimError, Result};
use ndarray::{Array1, Array4, ArrayView4, ArrayViewD};
use num_traits::Float;

/// Output spatial extent of a strided convolution.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Indices `t` in `[0, extent_out)` with `0 <= t*stride + offset - pad < extent_in`.
#[inline]
fn valid_range(
    extent_in: usize,
    extent_out: usize,
    offset: usize,
    stride: usize,
    pad: usize,
) -> (usize, usize) {
    let lo = if offset >= pad {
        0
    } else {
        (pad - offset).div_ceil(stride)
    };
    let limit = extent_in + pad;
    let hi = if offset >= limit {
        0
    } else {
        ((limit - offset - 1) / stride + 1).min(extent_out)
    };
    (lo, hi.max(lo))
}

pub fn conv2d<F: Float>(
    input: &ArrayView4<F>,
    kernel: &ArrayView4<F>,
    stride: usize,
    pad: usize,
) -> Result<Array4<F>> {
    let (n, ci, h, w) = input.dim();
    let (co, kci, kh, kw) = kernel.dim();
    if ci != kci {
        return Err(IrimError::shape(
            "conv2d",
            format!("kernel in-channels {ci}"),
            format!("{kci}"),
        ));
    }
    if stride == 0 {
        return Err(IrimError::Config("conv2d stride must be >= 1".into()));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(IrimError::shape(
            "conv2d",
            format!("spatial >= kernel ({kh}x{kw})"),
            format!("{h}x{w} with pad {pad}"),
        ));
    }
    let ho = conv_out_extent(h, kh, stride, pad);
    let wo = conv_out_extent(w, kw, stride, pad);
    let inp_owned = input.as_standard_layout();
    let inp = inp_owned.as_slice().expect("standard layout");
    let ker_owned = kernel.as_standard_layout();
    let ker = ker_owned.as_slice().expect("standard layout");
    let mut out = vec![F::zero(); n * co * ho * wo];
    for b in 0..n {
        for o in 0..co {
            for i in 0..ci {
                for p in 0..kh {
                    let (y_lo, y_hi) = valid_range(h, ho, p, stride, pad);
                    for q in 0..kw {
                        let kv = ker[((o * ci + i) * kh + p) * kw + q];
                        if kv == F::zero() {
                            continue;
                        }
                        let (x_lo, x_hi) = valid_range(w, wo, q, stride, pad);
                        if x_hi <= x_lo {
                            continue;
                        }
                        for y in y_lo..y_hi {
                            let iy = y * stride + p - pad;
                            let in_base = ((b * ci + i) * h + iy) * w;
                            let out_base = ((b * co + o) * ho + y) * wo;
                            if stride == 1 {
                                let ix0 = in_base + x_lo + q - pad;
                                let src = &inp[ix0..ix0 + (x_hi - x_lo)];
                                let dst = &mut out[out_base + x_lo..out_base + x_hi];
                                for (d, &s) in dst.iter_mut().zip(src) {
                                    *d = *d + kv * s;
                                }
                            } else {
                                for x in x_lo..x_hi {
                                    let ix = x * stride + q - pad;
                                    out[out_base + x] = out[out_base + x] + kv * inp[in_base + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Array4::from_shape_vec((n, co, ho, wo), out).expect("conv2d shape"))
}

/// Adjoint of [`conv2d`]: maps conv output shapes back to conv input shapes.
/// Output spatial extent is `(in - 1) * stride + kernel - 2 * pad`.
pub fn conv2d_transpose<F: Float>(
    input: &ArrayView4<F>,
    kernel: &ArrayView4<F>,
    stride: usize,
    pad: usize,
) -> Result<Array4<F>> {
    let (n, co, ho, wo) = input.dim();
    let (kco, ci, kh, kw) = kernel.dim();
    if co != kco {
        return Err(IrimError::shape(
            "conv2d_transpose",
            format!("kernel out-channels {co}"),
            format!("{kco}"),
        ));
    }
    if stride == 0 {
        return Err(IrimError::Config("conv2d_transpose stride must be >= 1".into()));
    }
    let h = (ho - 1) * stride + kh;
    let w = (wo - 1) * stride + kw;
    if h < 2 * pad || w < 2 * pad {
        return Err(IrimError::Config("conv2d_transpose padding too large".into()));
    }
    let (h, w) = (h - 2 * pad, w - 2 * pad);
    let inp_owned = input.as_standard_layout();
    let inp = inp_owned.as_slice().expect("standard layout");
    let ker_owned = kernel.as_standard_layout();
    let ker = ker_owned.as_slice().expect("standard layout");
    let mut out = vec![F::zero(); n * ci * h * w];
    for b in 0..n {
        for o in 0..co {
            for i in 0..ci {
                for p in 0..kh {
                    let (y_lo, y_hi) = valid_range(h, ho, p, stride, pad);
                    for q in 0..kw {
                        let kv = ker[((o * ci + i) * kh + p) * kw + q];
                        if kv == F::zero() {
                            continue;
                        }
                        let (x_lo, x_hi) = valid_range(w, wo, q, stride, pad);
                        if x_hi <= x_lo {
                            continue;
                        }
                        for y in y_lo..y_hi {
                            let iy = y * stride + p - pad;
                            let out_base = ((b * ci + i) * h + iy) * w;
                            let in_base = ((b * co + o) * ho + y) * wo;
                            if stride == 1 {
                                let ox0 = out_base + x_lo + q - pad;
                                let dst = &mut out[ox0..ox0 + (x_hi - x_lo)];
                                let src = &inp[in_base + x_lo..in_base + x_hi];
                                for (d, &s) in dst.iter_mut().zip(src) {
                                    *d = *d + kv * s;
                                }
                            } else {
                                for x in x_lo..x_hi {
                                    let ox = x * stride + q - pad;
                                    out[out_base + ox] =
                                        out[out_base + ox] + kv * inp[in_base + x];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Array4::from_shape_vec((n, ci, h, w), out).expect("conv2d_transpose shape"))
}

/// Gradient of `conv2d(input, k)` with respect to `k`, contracted against
/// `out_cot`. Also serves as the kernel gradient of `conv2d_transpose` with
/// the roles of input and cotangent swapped.
pub fn conv2d_kernel_grad<F: Float>(
    input: &ArrayView4<F>,
    out_cot: &ArrayView4<F>,
    kernel_hw: (usize, usize),
    stride: usize,
    pad: usize,
) -> Result<Array4<F>> {
    let (n, ci, h, w) = input.dim();
    let (n2, co, ho, wo) = out_cot.dim();
    if n != n2 {
        return Err(IrimError::shape("conv2d_kernel_grad", format!("batch {n}"), format!("{n2}")));
    }
    let (kh, kw) = kernel_hw;
    let inp_owned = input.as_standard_layout();
    let inp = inp_owned.as_slice().expect("standard layout");
    let cot_owned = out_cot.as_standard_layout();
    let cot = cot_owned.as_slice().expect("standard layout");
    let mut grad = Array4::<F>::zeros((co, ci, kh, kw));
    for b in 0..n {
        for o in 0..co {
            for i in 0..ci {
                for p in 0..kh {
                    let (y_lo, y_hi) = valid_range(h, ho, p, stride, pad);
                    for q in 0..kw {
                        let (x_lo, x_hi) = valid_range(w, wo, q, stride, pad);
                        if x_hi <= x_lo {
                            continue;
                        }
                        let mut acc = F::zero();
                        for y in y_lo..y_hi {
                            let iy = y * stride + p - pad;
                            let in_base = ((b * ci + i) * h + iy) * w;
                            let cot_base = ((b * co + o) * ho + y) * wo;
                            if stride == 1 {
                                let ix0 = in_base + x_lo + q - pad;
                                let src = &inp[ix0..ix0 + (x_hi - x_lo)];
                                let c = &cot[cot_base + x_lo..cot_base + x_hi];
                                for (&a, &b2) in c.iter().zip(src) {
                                    acc = acc + a * b2;
                                }
                            } else {
                                for x in x_lo..x_hi {
                                    let ix = x * stride + q - pad;
                                    acc = acc + cot[cot_base + x] * inp[in_base + ix];
                                }
                            }
                        }
                        grad[[o, i, p, q]] = grad[[o, i, p, q]] + acc;
                    }
                }
            }
        }
    }
    Ok(grad)
}

/// Per-output-channel bias gradient: sum of the cotangent over batch and space.
pub fn bias_grad<F: Float>(out_cot: &ArrayView4<F>) -> Array1<F> {
    let (n, co, ho, wo) = out_cot.dim();
    let mut g = Array1::<F>::zeros(co);
    for b in 0..n {
        for o in 0..co {
            let mut acc = F::zero();
            for y in 0..ho {
                for x in 0..wo {
                    acc = acc + out_cot[[b, o, y, x]];
                }
            }
            g[o] = g[o] + acc;
        }
    }
    g
}

pub fn ensure_finite(x: &ArrayViewD<f64>, context: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(IrimError::NonFinite(context.to_string()))
    }
}
