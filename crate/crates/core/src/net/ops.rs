//! Patch extraction, its adjoint, and max pooling on channels-last buffers.

use super::tensor::{FeatureMap, Tensor4};
use crate::error::{invalid, Result};
use crate::linalg::kernels::Elem;
use crate::linalg::Matrix;

pub(crate) fn conv_out_dim(size: usize, k: usize, pad: usize, stride: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if k == 0 || stride == 0 || padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Rows are output positions `(b, i, j)`; columns are `(ky, kx, c)` — the same
/// order as the rows of a `(k·k·c) × n` weight matrix.
pub(crate) fn im2col_nhwc<T: Elem>(
    x: &FeatureMap<T>,
    k: usize,
    pad: usize,
    stride: usize,
) -> Result<(Vec<T>, usize, usize)> {
    let ho = conv_out_dim(x.h, k, pad, stride);
    let wo = conv_out_dim(x.w, k, pad, stride);
    let (Some(ho), Some(wo)) = (ho, wo) else {
        return Err(invalid(format!(
            "kernel {k} (pad {pad}, stride {stride}) does not fit a {}x{} input",
            x.h, x.w
        )));
    };
    let c = x.c;
    let width = k * k * c;
    let mut cols = vec![T::default(); x.n * ho * wo * width];
    for b in 0..x.n {
        for i in 0..ho {
            for j in 0..wo {
                let row = ((b * ho + i) * wo + j) * width;
                for ky in 0..k {
                    let y = (i * stride + ky) as isize - pad as isize;
                    if y < 0 || y >= x.h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let xx = (j * stride + kx) as isize - pad as isize;
                        if xx < 0 || xx >= x.w as isize {
                            continue;
                        }
                        let src = ((b * x.h + y as usize) * x.w + xx as usize) * c;
                        let dst = row + (ky * k + kx) * c;
                        cols[dst..dst + c].copy_from_slice(&x.data[src..src + c]);
                    }
                }
            }
        }
    }
    Ok((cols, ho, wo))
}

/// Adjoint of [`im2col_nhwc`]: scatter-add patch gradients back to the input.
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im_nhwc<T: Elem>(
    cols: &[T],
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    k: usize,
    pad: usize,
    stride: usize,
) -> FeatureMap<T> {
    let ho = conv_out_dim(h, k, pad, stride).unwrap_or(0);
    let wo = conv_out_dim(w, k, pad, stride).unwrap_or(0);
    let width = k * k * c;
    let mut acc = vec![0.0f64; n * h * w * c];
    for b in 0..n {
        for i in 0..ho {
            for j in 0..wo {
                let row = ((b * ho + i) * wo + j) * width;
                for ky in 0..k {
                    let y = (i * stride + ky) as isize - pad as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let xx = (j * stride + kx) as isize - pad as isize;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        let dst = ((b * h + y as usize) * w + xx as usize) * c;
                        let src = row + (ky * k + kx) * c;
                        for ch in 0..c {
                            acc[dst + ch] += cols[src + ch].to_f64();
                        }
                    }
                }
            }
        }
    }
    FeatureMap {
        n,
        h,
        w,
        c,
        data: acc.into_iter().map(T::from_f64).collect(),
    }
}

/// Max pooling; returns the pooled map and, per output element, the flat
/// index of the winning input element (first maximum wins).
pub(crate) fn maxpool_nhwc<T: Elem>(
    x: &FeatureMap<T>,
    k: usize,
    stride: usize,
) -> Result<(FeatureMap<T>, Vec<u32>)> {
    let ho = conv_out_dim(x.h, k, 0, stride);
    let wo = conv_out_dim(x.w, k, 0, stride);
    let (Some(ho), Some(wo)) = (ho, wo) else {
        return Err(invalid(format!(
            "pool window {k} does not fit a {}x{} input",
            x.h, x.w
        )));
    };
    let c = x.c;
    let mut out = FeatureMap::zeros(x.n, ho, wo, c);
    let mut arg = vec![0u32; x.n * ho * wo * c];
    for b in 0..x.n {
        for i in 0..ho {
            for j in 0..wo {
                let obase = ((b * ho + i) * wo + j) * c;
                for ch in 0..c {
                    let mut best_idx = ((b * x.h + i * stride) * x.w + j * stride) * c + ch;
                    let mut best = x.data[best_idx];
                    for ky in 0..k {
                        for kx in 0..k {
                            let idx = ((b * x.h + i * stride + ky) * x.w + j * stride + kx) * c + ch;
                            if x.data[idx] > best {
                                best = x.data[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out.data[obase + ch] = best;
                    arg[obase + ch] = best_idx as u32;
                }
            }
        }
    }
    Ok((out, arg))
}

pub(crate) fn maxpool_backward<T: Elem>(
    grad_out: &FeatureMap<T>,
    arg: &[u32],
    h: usize,
    w: usize,
) -> FeatureMap<T> {
    let mut acc = vec![0.0f64; grad_out.n * h * w * grad_out.c];
    for (g, &a) in grad_out.data.iter().zip(arg) {
        acc[a as usize] += g.to_f64();
    }
    FeatureMap {
        n: grad_out.n,
        h,
        w,
        c: grad_out.c,
        data: acc.into_iter().map(T::from_f64).collect(),
    }
}

/// Patch matrix of an `n, c, h, w` tensor: `n·h_out·w_out` rows by `k·k·c`
/// columns, zero-padded at the borders.
pub fn im2col(x: &Tensor4, k: usize, pad: usize, stride: usize) -> Result<Matrix> {
    let fm: FeatureMap<f32> = x.to_nhwc();
    let (cols, ho, wo) = im2col_nhwc(&fm, k, pad, stride)?;
    Ok(Matrix::from_parts_unchecked(x.n * ho * wo, k * k * x.c, cols))
}
