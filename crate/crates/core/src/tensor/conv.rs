//! 2-D convolution, forward and backward.
//!
//! Layout: input [N, Cin, H, W], weight [Cout, Cin, kh, kw], bias [Cout],
//! zero padding, no dilation or groups. Per output element the accumulation
//! order is kernel-row-major (ci, then ky, then kx), and parallelism only
//! splits disjoint output regions, so results are bit-identical across runs
//! and thread counts.

use rayon::prelude::*;

use super::{Tensor, TensorError};

#[inline]
fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

/// Output extent of a 1-D convolution, or None if the kernel does not fit.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if kernel == 0 || stride == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Valid output range [lo, hi) for kernel offset `k`, i.e. the outputs whose
/// input index o*stride + k - pad lands inside [0, extent).
#[inline]
fn valid_out_range(
    extent: usize,
    out_extent: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> (usize, usize) {
    let lo = ceil_div(pad.saturating_sub(k), stride);
    if extent + pad <= k {
        return (lo, lo);
    }
    let hi = ((extent - 1 + pad - k) / stride + 1).min(out_extent);
    (lo, hi.max(lo))
}

struct ConvDims {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

fn check_conv(
    op: &'static str,
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<ConvDims, TensorError> {
    input.expect_rank(op, 4)?;
    weight.expect_rank(op, 4)?;
    bias.expect_rank(op, 1)?;
    if stride == 0 {
        return Err(TensorError::BadHyperparam {
            op,
            message: "stride must be >= 1".into(),
        });
    }
    let (n, cin, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let (cout, kh, kw) = (weight.dim(0), weight.dim(2), weight.dim(3));
    if weight.dim(1) != cin {
        return Err(TensorError::DimMismatch {
            op,
            dim: "in_channels",
            expected: cin,
            got: weight.dim(1),
        });
    }
    if bias.dim(0) != cout {
        return Err(TensorError::DimMismatch {
            op,
            dim: "out_channels",
            expected: cout,
            got: bias.dim(0),
        });
    }
    let oh = conv_out_extent(h, kh, stride, pad).ok_or_else(|| TensorError::BadHyperparam {
        op,
        message: format!("kernel height {kh} exceeds padded input height {}", h + 2 * pad),
    })?;
    let ow = conv_out_extent(w, kw, stride, pad).ok_or_else(|| TensorError::BadHyperparam {
        op,
        message: format!("kernel width {kw} exceeds padded input width {}", w + 2 * pad),
    })?;
    Ok(ConvDims {
        n,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        oh,
        ow,
    })
}

pub fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor, TensorError> {
    let d = check_conv("conv2d_forward", input, weight, bias, stride, pad)?;
    let mut out = Tensor::zeros(&[d.n, d.cout, d.oh, d.ow]);
    let inp = input.data();
    let wgt = weight.data();
    let b = bias.data();

    out.data_mut()
        .par_chunks_mut(d.oh * d.ow)
        .enumerate()
        .for_each(|(plane_idx, out_plane)| {
            let n = plane_idx / d.cout;
            let co = plane_idx % d.cout;
            out_plane.fill(b[co]);
            for ci in 0..d.cin {
                let in_plane = &inp[(n * d.cin + ci) * d.h * d.w..][..d.h * d.w];
                let filter = &wgt[(co * d.cin + ci) * d.kh * d.kw..][..d.kh * d.kw];
                for ky in 0..d.kh {
                    let (oy_lo, oy_hi) = valid_out_range(d.h, d.oh, ky, stride, pad);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - pad;
                        let in_row = &in_plane[iy * d.w..iy * d.w + d.w];
                        let out_row = &mut out_plane[oy * d.ow..oy * d.ow + d.ow];
                        for kx in 0..d.kw {
                            let wv = filter[ky * d.kw + kx];
                            let (ox_lo, ox_hi) = valid_out_range(d.w, d.ow, kx, stride, pad);
                            if ox_hi <= ox_lo {
                                continue;
                            }
                            if stride == 1 {
                                let ibase = ox_lo + kx - pad;
                                let len = ox_hi - ox_lo;
                                for (o, &i) in out_row[ox_lo..ox_hi]
                                    .iter_mut()
                                    .zip(&in_row[ibase..ibase + len])
                                {
                                    *o += wv * i;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    out_row[ox] += wv * in_row[ox * stride + kx - pad];
                                }
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Dot product with eight fixed accumulator lanes. The lane structure is part
/// of the kernel definition, so the summation order never varies.
#[inline]
fn dot_lanes(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let ab = &a[c * 8..c * 8 + 8];
        let bb = &b[c * 8..c * 8 + 8];
        for l in 0..8 {
            lanes[l] += ab[l] * bb[l];
        }
    }
    let mut tail = 0.0f32;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    let s0 = lanes[0] + lanes[4];
    let s1 = lanes[1] + lanes[5];
    let s2 = lanes[2] + lanes[6];
    let s3 = lanes[3] + lanes[7];
    ((s0 + s1) + (s2 + s3)) + tail
}

/// Gradients of a scalar loss w.r.t. conv2d_forward's input, weight and bias.
pub fn conv2d_backward(
    grad_out: &Tensor,
    saved_input: &Tensor,
    weight: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Tensor, Tensor), TensorError> {
    let op = "conv2d_backward";
    let bias_probe = Tensor::zeros(&[weight.dim(0)]);
    let d = check_conv(op, saved_input, weight, &bias_probe, stride, pad)?;
    let expected = [d.n, d.cout, d.oh, d.ow];
    if grad_out.shape() != expected {
        grad_out.expect_rank(op, 4)?;
        let names = ["batch", "out_channels", "out_height", "out_width"];
        for (i, name) in names.iter().enumerate() {
            if grad_out.dim(i) != expected[i] {
                return Err(TensorError::DimMismatch {
                    op,
                    dim: name,
                    expected: expected[i],
                    got: grad_out.dim(i),
                });
            }
        }
    }
    let gout = grad_out.data();
    let inp = saved_input.data();
    let wgt = weight.data();

    let mut grad_bias = Tensor::zeros(&[d.cout]);
    grad_bias
        .data_mut()
        .par_iter_mut()
        .enumerate()
        .for_each(|(co, gb)| {
            let mut acc = 0.0f32;
            for n in 0..d.n {
                let plane = &gout[(n * d.cout + co) * d.oh * d.ow..][..d.oh * d.ow];
                for &g in plane {
                    acc += g;
                }
            }
            *gb = acc;
        });

    let mut grad_input = Tensor::zeros(saved_input.shape());
    grad_input
        .data_mut()
        .par_chunks_mut(d.h * d.w)
        .enumerate()
        .for_each(|(plane_idx, gin_plane)| {
            let n = plane_idx / d.cin;
            let ci = plane_idx % d.cin;
            for co in 0..d.cout {
                let gout_plane = &gout[(n * d.cout + co) * d.oh * d.ow..][..d.oh * d.ow];
                let filter = &wgt[(co * d.cin + ci) * d.kh * d.kw..][..d.kh * d.kw];
                for ky in 0..d.kh {
                    let (oy_lo, oy_hi) = valid_out_range(d.h, d.oh, ky, stride, pad);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - pad;
                        let gin_row = &mut gin_plane[iy * d.w..iy * d.w + d.w];
                        let gout_row = &gout_plane[oy * d.ow..oy * d.ow + d.ow];
                        for kx in 0..d.kw {
                            let wv = filter[ky * d.kw + kx];
                            let (ox_lo, ox_hi) = valid_out_range(d.w, d.ow, kx, stride, pad);
                            if ox_hi <= ox_lo {
                                continue;
                            }
                            if stride == 1 {
                                let ibase = ox_lo + kx - pad;
                                let len = ox_hi - ox_lo;
                                for (i, &g) in gin_row[ibase..ibase + len]
                                    .iter_mut()
                                    .zip(&gout_row[ox_lo..ox_hi])
                                {
                                    *i += wv * g;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    gin_row[ox * stride + kx - pad] += wv * gout_row[ox];
                                }
                            }
                        }
                    }
                }
            }
        });

    let mut grad_weight = Tensor::zeros(weight.shape());
    let filter_len = d.cin * d.kh * d.kw;
    grad_weight
        .data_mut()
        .par_chunks_mut(filter_len)
        .enumerate()
        .for_each(|(co, gw_filter)| {
            for ci in 0..d.cin {
                for ky in 0..d.kh {
                    let (oy_lo, oy_hi) = valid_out_range(d.h, d.oh, ky, stride, pad);
                    for kx in 0..d.kw {
                        let (ox_lo, ox_hi) = valid_out_range(d.w, d.ow, kx, stride, pad);
                        let mut acc = 0.0f32;
                        if ox_hi > ox_lo {
                            for n in 0..d.n {
                                let gout_plane =
                                    &gout[(n * d.cout + co) * d.oh * d.ow..][..d.oh * d.ow];
                                let in_plane = &inp[(n * d.cin + ci) * d.h * d.w..][..d.h * d.w];
                                for oy in oy_lo..oy_hi {
                                    let iy = oy * stride + ky - pad;
                                    let gout_row = &gout_plane[oy * d.ow + ox_lo..oy * d.ow + ox_hi];
                                    if stride == 1 {
                                        let ibase = iy * d.w + ox_lo + kx - pad;
                                        acc += dot_lanes(
                                            gout_row,
                                            &in_plane[ibase..ibase + gout_row.len()],
                                        );
                                    } else {
                                        for (off, &g) in gout_row.iter().enumerate() {
                                            let ox = ox_lo + off;
                                            acc += g * in_plane[iy * d.w + ox * stride + kx - pad];
                                        }
                                    }
                                }
                            }
                        }
                        gw_filter[(ci * d.kh + ky) * d.kw + kx] = acc;
                    }
                }
            }
        });

    Ok((grad_input, grad_weight, grad_bias))
}
