//! Slice-level numeric kernels behind the graph operations.
//!
//! All image buffers are row-major `[N, C, H, W]`.

use crate::element::Element;

/// Geometry of a square-kernel 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    /// Output size, or `None` when the padded input is smaller than the kernel.
    pub fn output_size(&self) -> Option<(usize, usize)> {
        let out = |len: usize| {
            let padded = len + 2 * self.pad;
            (padded >= self.kernel && self.stride > 0).then(|| (padded - self.kernel) / self.stride + 1)
        };
        Some((out(self.height)?, out(self.width)?))
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Range of output positions `o` for which `o * stride + offset - pad` lands
/// inside `[0, len)`.
fn valid_range(out_len: usize, len: usize, offset: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if offset >= pad { 0 } else { (pad - offset).div_ceil(stride) };
    // o * stride + offset - pad <= len - 1
    let hi = if len + pad > offset {
        ((len + pad - offset - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Unfolds one image `[C, H, W]` into columns `[C*k*k, Ho*Wo]`.
pub fn im2col<T: Element>(g: &ConvGeometry, image: &[T], out: (usize, usize), cols: &mut [T]) {
    let (ho, wo) = out;
    let k = g.kernel;
    for c in 0..g.in_channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            let (oh_lo, oh_hi) = valid_range(ho, g.height, ki, g.stride, g.pad);
            for kj in 0..k {
                let (ow_lo, ow_hi) = valid_range(wo, g.width, kj, g.stride, g.pad);
                let row = ((c * k + ki) * k + kj) * ho * wo;
                let dst = &mut cols[row..row + ho * wo];
                dst.fill(T::zero());
                for oh in oh_lo..oh_hi {
                    let ih = oh * g.stride + ki - g.pad;
                    let src = &plane[ih * g.width..(ih + 1) * g.width];
                    let line = &mut dst[oh * wo..(oh + 1) * wo];
                    if g.stride == 1 {
                        let iw0 = ow_lo + kj - g.pad;
                        line[ow_lo..ow_hi].copy_from_slice(&src[iw0..iw0 + (ow_hi - ow_lo)]);
                    } else {
                        for ow in ow_lo..ow_hi {
                            line[ow] = src[ow * g.stride + kj - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back into an image, accumulating.
pub fn col2im<T: Element>(g: &ConvGeometry, cols: &[T], out: (usize, usize), image: &mut [T]) {
    let (ho, wo) = out;
    let k = g.kernel;
    for c in 0..g.in_channels {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            let (oh_lo, oh_hi) = valid_range(ho, g.height, ki, g.stride, g.pad);
            for kj in 0..k {
                let (ow_lo, ow_hi) = valid_range(wo, g.width, kj, g.stride, g.pad);
                let row = ((c * k + ki) * k + kj) * ho * wo;
                let src = &cols[row..row + ho * wo];
                for oh in oh_lo..oh_hi {
                    let ih = oh * g.stride + ki - g.pad;
                    let dst = &mut plane[ih * g.width..(ih + 1) * g.width];
                    let line = &src[oh * wo..(oh + 1) * wo];
                    for ow in ow_lo..ow_hi {
                        dst[ow * g.stride + kj - g.pad] += line[ow];
                    }
                }
            }
        }
    }
}

/// Cross-correlation of a batch with `weight` `[Cout, Cin, k, k]`.
pub fn conv2d_forward<T: Element>(
    g: &ConvGeometry,
    batch: usize,
    input: &[T],
    weight: &[T],
    out_channels: usize,
    bias: Option<&[T]>,
) -> Vec<T> {
    let (ho, wo) = g.output_size().expect("validated conv geometry");
    let plane_out = ho * wo;
    let in_len = g.in_channels * g.height * g.width;
    let patch = g.patch_len();
    let mut out = vec![T::zero(); batch * out_channels * plane_out];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); patch * plane_out] };
    for n in 0..batch {
        let image = &input[n * in_len..(n + 1) * in_len];
        let cols: &[T] = if g.is_pointwise() {
            image
        } else {
            im2col(g, image, (ho, wo), &mut cols);
            &cols
        };
        let dst = &mut out[n * out_channels * plane_out..(n + 1) * out_channels * plane_out];
        if let Some(bias) = bias {
            for (o, &b) in bias.iter().enumerate() {
                dst[o * plane_out..(o + 1) * plane_out].fill(b);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(
            out_channels,
            patch,
            plane_out,
            T::one(),
            weight,
            (patch, 1),
            cols,
            (plane_out, 1),
            beta,
            dst,
            (plane_out, 1),
        );
    }
    out
}

/// Gradients of [`conv2d_forward`]. Each requested gradient buffer is
/// accumulated into, not overwritten.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Element>(
    g: &ConvGeometry,
    batch: usize,
    input: &[T],
    weight: &[T],
    out_channels: usize,
    grad_out: &[T],
    mut grad_input: Option<&mut [T]>,
    mut grad_weight: Option<&mut [T]>,
    mut grad_bias: Option<&mut [T]>,
) {
    let (ho, wo) = g.output_size().expect("validated conv geometry");
    let plane_out = ho * wo;
    let in_len = g.in_channels * g.height * g.width;
    let patch = g.patch_len();
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { patch * plane_out }];
    let mut dcols = vec![T::zero(); patch * plane_out];
    for n in 0..batch {
        let dy = &grad_out[n * out_channels * plane_out..(n + 1) * out_channels * plane_out];
        if let Some(db) = grad_bias.as_deref_mut() {
            for (o, acc) in db.iter_mut().enumerate() {
                *acc += dy[o * plane_out..(o + 1) * plane_out].iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = grad_weight.as_deref_mut() {
            let image = &input[n * in_len..(n + 1) * in_len];
            let cols: &[T] = if g.is_pointwise() {
                image
            } else {
                im2col(g, image, (ho, wo), &mut cols);
                &cols
            };
            // dW[Cout, patch] += dY[Cout, P] * cols^T[P, patch]
            T::gemm(
                out_channels,
                plane_out,
                patch,
                T::one(),
                dy,
                (plane_out, 1),
                cols,
                (1, plane_out),
                T::one(),
                dw,
                (patch, 1),
            );
        }
        if let Some(dx) = grad_input.as_deref_mut() {
            let dx = &mut dx[n * in_len..(n + 1) * in_len];
            // dcols[patch, P] = W^T[patch, Cout] * dY[Cout, P]
            if g.is_pointwise() {
                T::gemm(
                    patch,
                    out_channels,
                    plane_out,
                    T::one(),
                    weight,
                    (1, patch),
                    dy,
                    (plane_out, 1),
                    T::one(),
                    dx,
                    (plane_out, 1),
                );
            } else {
                T::gemm(
                    patch,
                    out_channels,
                    plane_out,
                    T::one(),
                    weight,
                    (1, patch),
                    dy,
                    (plane_out, 1),
                    T::zero(),
                    &mut dcols,
                    (plane_out, 1),
                );
                col2im(g, &dcols, (ho, wo), dx);
            }
        }
    }
}

/// Per-plane instance normalization. Returns the normalized planes and the
/// reciprocal standard deviation of each plane (zero for degenerate planes).
pub fn instance_norm_forward<T: Element>(input: &[T], plane: usize, eps: f64) -> (Vec<T>, Vec<T>) {
    let planes = input.len() / plane;
    let mut out = vec![T::zero(); input.len()];
    let mut inv_std = vec![T::zero(); planes];
    for p in 0..planes {
        let x = &input[p * plane..(p + 1) * plane];
        let mean = x.iter().map(|v| v.as_f64()).sum::<f64>() / plane as f64;
        let var = x.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / plane as f64;
        let denom = var + eps;
        let inv = if denom > 0.0 { 1.0 / denom.sqrt() } else { 0.0 };
        inv_std[p] = T::of(inv);
        for (o, v) in out[p * plane..(p + 1) * plane].iter_mut().zip(x) {
            *o = T::of((v.as_f64() - mean) * inv);
        }
    }
    (out, inv_std)
}

/// `dx = inv_std * (dy - mean(dy) - y * mean(dy * y))`, accumulated into `grad_input`.
pub fn instance_norm_backward<T: Element>(
    normalized: &[T],
    inv_std: &[T],
    plane: usize,
    grad_out: &[T],
    grad_input: &mut [T],
) {
    for (p, &inv) in inv_std.iter().enumerate() {
        let range = p * plane..(p + 1) * plane;
        let y = &normalized[range.clone()];
        let dy = &grad_out[range.clone()];
        let mean_dy = dy.iter().map(|v| v.as_f64()).sum::<f64>() / plane as f64;
        let mean_dyy = dy
            .iter()
            .zip(y)
            .map(|(a, b)| a.as_f64() * b.as_f64())
            .sum::<f64>()
            / plane as f64;
        let inv = inv.as_f64();
        for ((dx, &d), &yv) in grad_input[range].iter_mut().zip(dy).zip(y) {
            *dx += T::of(inv * (d.as_f64() - mean_dy - yv.as_f64() * mean_dyy));
        }
    }
}

/// Fixed Laplacian high-pass `[[0,-1,0],[-1,4,-1],[0,-1,0]]` applied per plane
/// with replicated borders, so constant planes map to exactly zero.
pub fn highpass_forward<T: Element>(input: &[T], height: usize, width: usize) -> Vec<T> {
    let plane = height * width;
    let four = T::of(4.0);
    let mut out = vec![T::zero(); input.len()];
    for (x, y) in input.chunks_exact(plane).zip(out.chunks_exact_mut(plane)) {
        for i in 0..height {
            let up = i.saturating_sub(1);
            let down = (i + 1).min(height - 1);
            for j in 0..width {
                let left = j.saturating_sub(1);
                let right = (j + 1).min(width - 1);
                y[i * width + j] = four * x[i * width + j]
                    - x[up * width + j]
                    - x[down * width + j]
                    - x[i * width + left]
                    - x[i * width + right];
            }
        }
    }
    out
}

pub fn highpass_backward<T: Element>(grad_out: &[T], height: usize, width: usize, grad_input: &mut [T]) {
    let plane = height * width;
    let four = T::of(4.0);
    for (dy, dx) in grad_out.chunks_exact(plane).zip(grad_input.chunks_exact_mut(plane)) {
        for i in 0..height {
            let up = i.saturating_sub(1);
            let down = (i + 1).min(height - 1);
            for j in 0..width {
                let left = j.saturating_sub(1);
                let right = (j + 1).min(width - 1);
                let g = dy[i * width + j];
                dx[i * width + j] += four * g;
                dx[up * width + j] -= g;
                dx[down * width + j] -= g;
                dx[i * width + left] -= g;
                dx[i * width + right] -= g;
            }
        }
    }
}

/// Nearest-neighbour 2x upsampling of every plane.
pub fn upsample2x_forward<T: Element>(input: &[T], height: usize, width: usize) -> Vec<T> {
    let plane = height * width;
    let mut out = vec![T::zero(); input.len() * 4];
    for (x, y) in input.chunks_exact(plane).zip(out.chunks_exact_mut(plane * 4)) {
        for i in 0..2 * height {
            for j in 0..2 * width {
                y[i * 2 * width + j] = x[(i / 2) * width + j / 2];
            }
        }
    }
    out
}

pub fn upsample2x_backward<T: Element>(grad_out: &[T], height: usize, width: usize, grad_input: &mut [T]) {
    let plane = height * width;
    for (dy, dx) in grad_out.chunks_exact(plane * 4).zip(grad_input.chunks_exact_mut(plane)) {
        for i in 0..2 * height {
            for j in 0..2 * width {
                dx[(i / 2) * width + j / 2] += dy[i * 2 * width + j];
            }
        }
    }
}
