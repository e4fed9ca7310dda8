//! Pointwise, pooling, dense and loss kernels.

use rayon::prelude::*;

use super::{Tensor, TensorError};

pub fn relu_forward(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

/// Subgradient at 0 is 0.
pub fn relu_backward(grad_out: &Tensor, saved_input: &Tensor) -> Result<Tensor, TensorError> {
    if grad_out.shape() != saved_input.shape() {
        return Err(TensorError::RankMismatch {
            op: "relu_backward",
            expected: saved_input.rank(),
            got: grad_out.shape().to_vec(),
        });
    }
    let mut out = grad_out.clone();
    for (g, &x) in out.data_mut().iter_mut().zip(saved_input.data()) {
        if x <= 0.0 {
            *g = 0.0;
        }
    }
    Ok(out)
}

fn pool_dims(
    op: &'static str,
    input: &Tensor,
    kernel: usize,
    stride: usize,
) -> Result<(usize, usize, usize, usize, usize, usize), TensorError> {
    input.expect_rank(op, 4)?;
    if kernel == 0 || stride == 0 {
        return Err(TensorError::BadHyperparam {
            op,
            message: "kernel and stride must be >= 1".into(),
        });
    }
    let (n, c, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    if kernel > h || kernel > w {
        return Err(TensorError::BadHyperparam {
            op,
            message: format!("pool kernel {kernel} exceeds input {h}x{w}"),
        });
    }
    let oh = (h - kernel) / stride + 1;
    let ow = (w - kernel) / stride + 1;
    Ok((n, c, h, w, oh, ow))
}

pub fn maxpool2d_forward(
    input: &Tensor,
    kernel: usize,
    stride: usize,
) -> Result<Tensor, TensorError> {
    let (n, c, h, w, oh, ow) = pool_dims("maxpool2d_forward", input, kernel, stride)?;
    let inp = input.data();
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    out.data_mut()
        .par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(plane_idx, out_plane)| {
            let in_plane = &inp[plane_idx * h * w..][..h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    for ky in 0..kernel {
                        let row = (oy * stride + ky) * w + ox * stride;
                        for &v in &in_plane[row..row + kernel] {
                            if v > best {
                                best = v;
                            }
                        }
                    }
                    out_plane[oy * ow + ox] = best;
                }
            }
        });
    Ok(out)
}

/// The first (row-major) maximal element of each window receives the gradient.
pub fn maxpool2d_backward(
    grad_out: &Tensor,
    saved_input: &Tensor,
    kernel: usize,
    stride: usize,
) -> Result<Tensor, TensorError> {
    let op = "maxpool2d_backward";
    let (n, c, h, w, oh, ow) = pool_dims(op, saved_input, kernel, stride)?;
    if grad_out.shape() != [n, c, oh, ow] {
        return Err(TensorError::RankMismatch {
            op,
            expected: 4,
            got: grad_out.shape().to_vec(),
        });
    }
    let inp = saved_input.data();
    let gout = grad_out.data();
    let mut grad_input = Tensor::zeros(saved_input.shape());
    grad_input
        .data_mut()
        .par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(plane_idx, gin_plane)| {
            let in_plane = &inp[plane_idx * h * w..][..h * w];
            let gout_plane = &gout[plane_idx * oh * ow..][..oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let idx = (oy * stride + ky) * w + ox * stride + kx;
                            if in_plane[idx] > best {
                                best = in_plane[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    gin_plane[best_idx] += gout_plane[oy * ow + ox];
                }
            }
        });
    Ok(grad_input)
}

/// Mean over the spatial extent: [N, C, H, W] -> [N, C].
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor, TensorError> {
    input.expect_rank("global_avg_pool", 4)?;
    let (n, c, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let area = (h * w) as f32;
    let inp = input.data();
    let mut out = Tensor::zeros(&[n, c]);
    for (plane_idx, o) in out.data_mut().iter_mut().enumerate() {
        let plane = &inp[plane_idx * h * w..][..h * w];
        let mut acc = 0.0f32;
        for &v in plane {
            acc += v;
        }
        *o = acc / area;
    }
    Ok(out)
}

pub fn global_avg_pool_backward(
    grad_out: &Tensor,
    input_shape: &[usize],
) -> Result<Tensor, TensorError> {
    let op = "global_avg_pool_backward";
    grad_out.expect_rank(op, 2)?;
    if input_shape.len() != 4 || grad_out.dim(0) != input_shape[0] || grad_out.dim(1) != input_shape[1]
    {
        return Err(TensorError::RankMismatch {
            op,
            expected: 4,
            got: input_shape.to_vec(),
        });
    }
    let (h, w) = (input_shape[2], input_shape[3]);
    let scale = 1.0 / (h * w) as f32;
    let mut grad_input = Tensor::zeros(input_shape);
    for (plane_idx, plane) in grad_input.data_mut().chunks_mut(h * w).enumerate() {
        plane.fill(grad_out.data()[plane_idx] * scale);
    }
    Ok(grad_input)
}

/// input [N, F], weight [O, F], bias [O] -> [N, O].
pub fn dense_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
) -> Result<Tensor, TensorError> {
    let op = "dense_forward";
    input.expect_rank(op, 2)?;
    weight.expect_rank(op, 2)?;
    bias.expect_rank(op, 1)?;
    let (n, f) = (input.dim(0), input.dim(1));
    let (o, wf) = (weight.dim(0), weight.dim(1));
    if wf != f {
        return Err(TensorError::DimMismatch {
            op,
            dim: "in_features",
            expected: f,
            got: wf,
        });
    }
    if bias.dim(0) != o {
        return Err(TensorError::DimMismatch {
            op,
            dim: "out_features",
            expected: o,
            got: bias.dim(0),
        });
    }
    let mut out = Tensor::zeros(&[n, o]);
    for row in 0..n {
        let x = &input.data()[row * f..][..f];
        let out_row = &mut out.data_mut()[row * o..][..o];
        for (j, ov) in out_row.iter_mut().enumerate() {
            let wrow = &weight.data()[j * f..][..f];
            let mut acc = bias.data()[j];
            for (a, b) in wrow.iter().zip(x) {
                acc += a * b;
            }
            *ov = acc;
        }
    }
    Ok(out)
}

pub fn dense_backward(
    grad_out: &Tensor,
    saved_input: &Tensor,
    weight: &Tensor,
) -> Result<(Tensor, Tensor, Tensor), TensorError> {
    let op = "dense_backward";
    grad_out.expect_rank(op, 2)?;
    saved_input.expect_rank(op, 2)?;
    weight.expect_rank(op, 2)?;
    let (n, f) = (saved_input.dim(0), saved_input.dim(1));
    let o = weight.dim(0);
    if grad_out.dim(0) != n || grad_out.dim(1) != o {
        return Err(TensorError::DimMismatch {
            op,
            dim: "out_features",
            expected: o,
            got: grad_out.dim(1),
        });
    }
    let mut grad_input = Tensor::zeros(&[n, f]);
    let mut grad_weight = Tensor::zeros(&[o, f]);
    let mut grad_bias = Tensor::zeros(&[o]);
    for row in 0..n {
        let g = &grad_out.data()[row * o..][..o];
        let x = &saved_input.data()[row * f..][..f];
        let gin = &mut grad_input.data_mut()[row * f..][..f];
        for (j, &gj) in g.iter().enumerate() {
            let wrow = &weight.data()[j * f..][..f];
            for (gi, &wv) in gin.iter_mut().zip(wrow) {
                *gi += gj * wv;
            }
        }
        for (j, &gj) in g.iter().enumerate() {
            let gwrow = &mut grad_weight.data_mut()[j * f..][..f];
            for (gw, &xv) in gwrow.iter_mut().zip(x) {
                *gw += gj * xv;
            }
            grad_bias.data_mut()[j] += gj;
        }
    }
    Ok((grad_input, grad_weight, grad_bias))
}

/// Mean cross-entropy over the batch and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy(
    logits: &Tensor,
    labels: &[usize],
) -> Result<(f32, Tensor), TensorError> {
    let op = "softmax_cross_entropy";
    logits.expect_rank(op, 2)?;
    let (n, k) = (logits.dim(0), logits.dim(1));
    if labels.len() != n {
        return Err(TensorError::DimMismatch {
            op,
            dim: "batch",
            expected: n,
            got: labels.len(),
        });
    }
    for (sample, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(TensorError::LabelOutOfRange {
                sample,
                label,
                num_classes: k,
            });
        }
    }
    let mut grad = Tensor::zeros(&[n, k]);
    let inv_n = 1.0 / n as f32;
    let mut loss_acc = 0.0f64;
    for row in 0..n {
        let z = &logits.data()[row * k..][..k];
        let g = &mut grad.data_mut()[row * k..][..k];
        let mut m = f32::NEG_INFINITY;
        for &v in z {
            if v > m {
                m = v;
            }
        }
        let mut denom = 0.0f32;
        for (gi, &v) in g.iter_mut().zip(z) {
            let e = (v - m).exp();
            *gi = e;
            denom += e;
        }
        let label = labels[row];
        loss_acc += f64::from(denom.ln() - (z[label] - m));
        for gi in g.iter_mut() {
            *gi = *gi / denom * inv_n;
        }
        g[label] -= inv_n;
    }
    Ok(((loss_acc / n as f64) as f32, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_clamps_negatives() {
        let x = Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu_forward(&x).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn relu_backward_masks_nonpositive() {
        let x = Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        let g = Tensor::from_vec(&[3], vec![5.0, 5.0, 5.0]).unwrap();
        assert_eq!(relu_backward(&g, &x).unwrap().data(), &[0.0, 0.0, 5.0]);
    }

    #[test]
    fn maxpool_takes_window_max() {
        let x = Tensor::from_vec(
            &[1, 1, 2, 4],
            vec![1.0, 2.0, 5.0, 4.0, 3.0, 0.0, -1.0, 6.0],
        )
        .unwrap();
        let out = maxpool2d_forward(&x, 2, 2).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 2]);
        assert_eq!(out.data(), &[3.0, 6.0]);
    }

    #[test]
    fn maxpool_backward_credits_first_max_on_tie() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![7.0, 7.0, 7.0, 7.0]).unwrap();
        let g = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let gi = maxpool2d_backward(&g, &x, 2, 2).unwrap();
        assert_eq!(gi.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn gap_is_plane_mean() {
        let x = Tensor::from_vec(&[1, 2, 1, 2], vec![1.0, 3.0, -2.0, 2.0]).unwrap();
        let out = global_avg_pool(&x).unwrap();
        assert_eq!(out.shape(), &[1, 2]);
        assert_eq!(out.data(), &[2.0, 0.0]);
    }

    #[test]
    fn gap_backward_spreads_evenly() {
        let g = Tensor::from_vec(&[1, 1], vec![8.0]).unwrap();
        let gi = global_avg_pool_backward(&g, &[1, 1, 2, 2]).unwrap();
        assert_eq!(gi.data(), &[2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn dense_matches_manual_affine() {
        let x = Tensor::from_vec(&[1, 2], vec![2.0, -1.0]).unwrap();
        let w = Tensor::from_vec(&[2, 2], vec![1.0, 0.5, -1.0, 2.0]).unwrap();
        let b = Tensor::from_vec(&[2], vec![0.25, 0.0]).unwrap();
        let out = dense_forward(&x, &w, &b).unwrap();
        assert_eq!(out.data(), &[2.0 - 0.5 + 0.25, -2.0 - 2.0]);
    }

    #[test]
    fn uniform_logits_lose_ln_k() {
        let logits = Tensor::filled(&[2, 5], 0.3);
        let (loss, _) = softmax_cross_entropy(&logits, &[0, 4]).unwrap();
        assert!((loss - (5.0f32).ln()).abs() < 1e-6);
    }

    #[test]
    fn label_out_of_range_is_reported() {
        let logits = Tensor::zeros(&[2, 3]);
        let err = softmax_cross_entropy(&logits, &[0, 3]).unwrap_err();
        assert_eq!(
            err,
            TensorError::LabelOutOfRange {
                sample: 1,
                label: 3,
                num_classes: 3
            }
        );
    }

    #[test]
    fn xent_grad_rows_sum_to_zero() {
        let logits = Tensor::from_vec(&[1, 3], vec![1.0, -2.0, 0.5]).unwrap();
        let (_, grad) = softmax_cross_entropy(&logits, &[2]).unwrap();
        let s: f32 = grad.data().iter().sum();
        assert!(s.abs() < 1e-7);
    }
}
