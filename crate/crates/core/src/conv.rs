//! Convolution and pooling kernels used by the tape.
//!
//! Convolutions are "same" cross-correlations with stride 1: an odd k×k
//! kernel with `(k - 1) / 2` zero padding on every side. Each image is
//! lowered to a column matrix and multiplied with the filter bank.

use crate::error::{Error, Result};
use crate::scalar::{gemm, Layout, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kernel: usize,
}

impl ConvGeometry {
    pub fn infer(x: &[usize], w: &[usize], b: &[usize]) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 || b.len() != 1 {
            return Err(Error::Dimension(format!(
                "conv2d expects x[N×C×H×W], w[F×C×k×k], b[F]; got {:?}, {:?}, {:?}",
                x, w, b
            )));
        }
        if x[1] != w[1] {
            return Err(Error::Dimension(format!(
                "conv2d channel mismatch: input {:?} has {} channels, weights {:?} expect {}",
                x, x[1], w, w[1]
            )));
        }
        if w[2] != w[3] || w[2].is_multiple_of(2) {
            return Err(Error::Dimension(format!(
                "conv2d needs an odd square kernel, got {:?}",
                w
            )));
        }
        if b[0] != w[0] {
            return Err(Error::Dimension(format!(
                "conv2d bias {:?} does not match {} filters",
                b, w[0]
            )));
        }
        Ok(ConvGeometry {
            batch: x[0],
            channels: x[1],
            height: x[2],
            width: x[3],
            filters: w[0],
            kernel: w[2],
        })
    }

    fn pad(&self) -> isize {
        (self.kernel as isize - 1) / 2
    }

    fn plane(&self) -> usize {
        self.height * self.width
    }

    fn patch(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.filters, self.height, self.width]
    }
}

/// Lowers one C×H×W image into a `patch × plane` column matrix.
fn im2col<T: Scalar>(g: &ConvGeometry, image: &[T], col: &mut [T]) {
    let (h, w, k, pad) = (g.height as isize, g.width as isize, g.kernel, g.pad());
    let plane = g.plane();
    for c in 0..g.channels {
        let src = &image[c * plane..(c + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..h {
                    let iy = oy + ky as isize - pad;
                    let out = &mut dst[(oy * w) as usize..((oy + 1) * w) as usize];
                    if iy < 0 || iy >= h {
                        out.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let line = &src[(iy * w) as usize..((iy + 1) * w) as usize];
                    for ox in 0..w {
                        let ix = ox + kx as isize - pad;
                        out[ox as usize] = if ix < 0 || ix >= w {
                            T::zero()
                        } else {
                            line[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters a column matrix back onto an image.
fn col2im_add<T: Scalar>(g: &ConvGeometry, col: &[T], image: &mut [T]) {
    let (h, w, k, pad) = (g.height as isize, g.width as isize, g.kernel, g.pad());
    let plane = g.plane();
    for c in 0..g.channels {
        let dst = &mut image[c * plane..(c + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..h {
                    let iy = oy + ky as isize - pad;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    for ox in 0..w {
                        let ix = ox + kx as isize - pad;
                        if ix >= 0 && ix < w {
                            dst[(iy * w + ix) as usize] += src[(oy * w + ox) as usize];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(g: &ConvGeometry, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let plane = g.plane();
    let patch = g.patch();
    let in_stride = g.channels * plane;
    let out_stride = g.filters * plane;
    let mut out = vec![T::zero(); g.batch * out_stride];
    let mut col = vec![T::zero(); patch * plane];
    for n in 0..g.batch {
        im2col(g, &x[n * in_stride..(n + 1) * in_stride], &mut col);
        let dst = &mut out[n * out_stride..(n + 1) * out_stride];
        for (f, bias) in b.iter().enumerate() {
            dst[f * plane..(f + 1) * plane].iter_mut().for_each(|v| *v = *bias);
        }
        gemm(g.filters, patch, plane, w, Layout::Normal, &col, Layout::Normal, T::one(), dst);
    }
    out
}

/// Accumulates input, weight and bias gradients for an upstream gradient
/// `gout` of shape N×F×H×W. Any of the three sinks may be skipped.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeometry,
    x: &[T],
    w: &[T],
    gout: &[T],
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
    mut gb: Option<&mut [T]>,
) {
    let plane = g.plane();
    let patch = g.patch();
    let in_stride = g.channels * plane;
    let out_stride = g.filters * plane;
    let mut col = vec![T::zero(); patch * plane];
    let mut gcol = vec![T::zero(); patch * plane];
    for n in 0..g.batch {
        let go = &gout[n * out_stride..(n + 1) * out_stride];
        if let Some(gw) = gw.as_deref_mut() {
            im2col(g, &x[n * in_stride..(n + 1) * in_stride], &mut col);
            // gw[F×patch] += go[F×plane] · colᵀ
            gemm(g.filters, plane, patch, go, Layout::Normal, &col, Layout::Transposed, T::one(), gw);
        }
        if let Some(gx) = gx.as_deref_mut() {
            // gcol[patch×plane] = wᵀ · go
            gemm(patch, g.filters, plane, w, Layout::Transposed, go, Layout::Normal, T::zero(), &mut gcol);
            col2im_add(g, &gcol, &mut gx[n * in_stride..(n + 1) * in_stride]);
        }
        if let Some(gb) = gb.as_deref_mut() {
            for (f, acc) in gb.iter_mut().enumerate() {
                *acc += go[f * plane..(f + 1) * plane].iter().copied().sum::<T>();
            }
        }
    }
}

/// 2×2 stride-2 max pooling. Returns the pooled values and, for every
/// output cell, the flat input index of the (first row-major) maximum.
pub(crate) fn maxpool2d_forward<T: Scalar>(shape: &[usize], x: &[T]) -> Result<(Vec<usize>, Vec<T>, Vec<usize>)> {
    if shape.len() != 4 {
        return Err(Error::Dimension(format!(
            "maxpool2d expects N×C×H×W, got {:?}",
            shape
        )));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Dimension(format!(
            "maxpool2d needs even spatial dims, got {}×{}",
            h, w
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for p in 0..n * c {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    Ok((vec![n, c, oh, ow], out, arg))
}
