//! im2col-based convolution kernels.
//!
//! Both the forward convolution and the transposed convolution are expressed
//! over one [`Geometry`]: a "wide" feature map (the conv input, or the
//! transposed-conv output) and a "narrow" one (the conv output, or the
//! transposed-conv input). `im2col` gathers the wide map into patch columns,
//! `col2im` scatters them back, and the two are exact adjoints.

use super::gemm::gemm;
use super::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Geometry {
    pub channels: usize,
    pub wide_h: usize,
    pub wide_w: usize,
    pub narrow_h: usize,
    pub narrow_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Geometry {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn narrow_len(&self) -> usize {
        self.narrow_h * self.narrow_w
    }

    pub fn wide_len(&self) -> usize {
        self.channels * self.wide_h * self.wide_w
    }

    /// True when patches are single pixels laid out exactly like the wide map.
    fn is_pointwise(&self) -> bool {
        self.kernel == 1
            && self.stride == 1
            && self.padding == 0
            && self.narrow_h == self.wide_h
            && self.narrow_w == self.wide_w
    }

    #[inline]
    fn source(&self, narrow: usize, offset: usize, wide: usize) -> Option<usize> {
        let pos = (narrow * self.stride + offset).checked_sub(self.padding)?;
        (pos < wide).then_some(pos)
    }
}

pub(crate) fn im2col<T: Real>(g: &Geometry, wide: &[T], cols: &mut [T]) {
    let k = g.kernel;
    let nl = g.narrow_len();
    for c in 0..g.channels {
        let plane = &wide[c * g.wide_h * g.wide_w..(c + 1) * g.wide_h * g.wide_w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * nl..(row + 1) * nl];
                for oy in 0..g.narrow_h {
                    let out = &mut dst[oy * g.narrow_w..(oy + 1) * g.narrow_w];
                    match g.source(oy, ki, g.wide_h) {
                        None => out.fill(T::zero()),
                        Some(iy) => {
                            let src = &plane[iy * g.wide_w..(iy + 1) * g.wide_w];
                            for (ox, o) in out.iter_mut().enumerate() {
                                *o = match g.source(ox, kj, g.wide_w) {
                                    Some(ix) => src[ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adds the patch columns back into the wide map.
pub(crate) fn col2im<T: Real>(g: &Geometry, cols: &[T], wide: &mut [T]) {
    let k = g.kernel;
    let nl = g.narrow_len();
    for c in 0..g.channels {
        let plane = &mut wide[c * g.wide_h * g.wide_w..(c + 1) * g.wide_h * g.wide_w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * nl..(row + 1) * nl];
                for oy in 0..g.narrow_h {
                    let Some(iy) = g.source(oy, ki, g.wide_h) else {
                        continue;
                    };
                    let dst = &mut plane[iy * g.wide_w..(iy + 1) * g.wide_w];
                    let srow = &src[oy * g.narrow_w..(oy + 1) * g.narrow_w];
                    for (ox, v) in srow.iter().enumerate() {
                        if let Some(ix) = g.source(ox, kj, g.wide_w) {
                            dst[ix] = dst[ix] + *v;
                        }
                    }
                }
            }
        }
    }
}

/// Convolution of one sample: `wide [C, H, W]` -> `out [Cout, h, w]`.
/// `weight` is `[Cout, C*K*K]`.
pub(crate) fn conv_forward<T: Real>(
    g: &Geometry,
    wide: &[T],
    weight: &[T],
    out_channels: usize,
    out: &mut [T],
    scratch: &mut Vec<T>,
) {
    let rows = g.col_rows();
    let cols: &[T] = if g.is_pointwise() {
        wide
    } else {
        scratch.resize(rows * g.narrow_len(), T::zero());
        im2col(g, wide, scratch);
        scratch
    };
    gemm(out_channels, rows, g.narrow_len(), weight, false, cols, false, out, T::zero());
}

/// Gradients of one sample's convolution. `grad_wide` is overwritten,
/// `grad_weight` is accumulated.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<T: Real>(
    g: &Geometry,
    wide: &[T],
    weight: &[T],
    out_channels: usize,
    grad_out: &[T],
    grad_wide: Option<&mut [T]>,
    grad_weight: Option<&mut [T]>,
    scratch: &mut Vec<T>,
) {
    let rows = g.col_rows();
    let nl = g.narrow_len();
    if let Some(gw) = grad_weight {
        let cols: &[T] = if g.is_pointwise() {
            wide
        } else {
            scratch.resize(rows * nl, T::zero());
            im2col(g, wide, scratch);
            scratch
        };
        gemm(out_channels, nl, rows, grad_out, false, cols, true, gw, T::one());
    }
    if let Some(gi) = grad_wide {
        if g.is_pointwise() {
            gemm(rows, out_channels, nl, weight, true, grad_out, false, gi, T::zero());
        } else {
            scratch.resize(rows * nl, T::zero());
            gemm(rows, out_channels, nl, weight, true, grad_out, false, scratch, T::zero());
            gi.fill(T::zero());
            col2im(g, scratch, gi);
        }
    }
}

/// Transposed convolution of one sample: `narrow [Cin, h, w]` -> `wide
/// [Cout, H, W]` with `weight [Cin, Cout*K*K]`. `g.channels` is Cout.
pub(crate) fn conv_transpose_forward<T: Real>(
    g: &Geometry,
    narrow: &[T],
    weight: &[T],
    in_channels: usize,
    wide: &mut [T],
    scratch: &mut Vec<T>,
) {
    let rows = g.col_rows();
    let nl = g.narrow_len();
    wide.fill(T::zero());
    if g.is_pointwise() {
        gemm(rows, in_channels, nl, weight, true, narrow, false, wide, T::zero());
        return;
    }
    scratch.resize(rows * nl, T::zero());
    gemm(rows, in_channels, nl, weight, true, narrow, false, scratch, T::zero());
    col2im(g, scratch, wide);
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose_backward<T: Real>(
    g: &Geometry,
    narrow: &[T],
    weight: &[T],
    in_channels: usize,
    grad_wide: &[T],
    grad_narrow: Option<&mut [T]>,
    grad_weight: Option<&mut [T]>,
    scratch: &mut Vec<T>,
) {
    let rows = g.col_rows();
    let nl = g.narrow_len();
    let cols: &[T] = if g.is_pointwise() {
        grad_wide
    } else {
        scratch.resize(rows * nl, T::zero());
        im2col(g, grad_wide, scratch);
        scratch
    };
    if let Some(gn) = grad_narrow {
        gemm(in_channels, rows, nl, weight, false, cols, false, gn, T::zero());
    }
    if let Some(gw) = grad_weight {
        gemm(in_channels, nl, rows, narrow, false, cols, true, gw, T::one());
    }
}
