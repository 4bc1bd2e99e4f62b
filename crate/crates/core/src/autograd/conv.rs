//! im2col-based 2D convolution kernels over a single `[C, H, W]` sample.

use super::tensor::{gemm, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    /// Geometry of a forward convolution on an `h×w` input.
    pub fn forward(channels: usize, h: usize, w: usize, kernel: usize, stride: usize, pad: usize) -> Option<Self> {
        if h + 2 * pad < kernel || w + 2 * pad < kernel || stride == 0 {
            return None;
        }
        Some(Self {
            channels,
            height: h,
            width: w,
            kernel,
            stride,
            pad,
            out_height: (h + 2 * pad - kernel) / stride + 1,
            out_width: (w + 2 * pad - kernel) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_height * self.out_width
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Range of output columns `ox` whose input column `ox·s + kx - p` lies
/// inside `0..width`.
fn valid_cols(g: &ConvGeometry, kx: usize) -> (usize, usize) {
    let (s, p) = (g.stride, g.pad);
    let lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
    let hi = if g.width + p > kx {
        ((g.width + p - kx).div_ceil(s)).min(g.out_width)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Unfolds `x` (`[C, H, W]`) into `cols` (`[C·k·k, Ho·Wo]`).
pub fn im2col<T: Real>(x: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.pad as isize);
    let plane = g.col_cols();
    for c in 0..g.channels {
        let xc = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_cols(g, kx);
                for oy in 0..g.out_height {
                    let iy = (oy * s + ky) as isize - p;
                    let drow = &mut dst[oy * g.out_width..(oy + 1) * g.out_width];
                    if iy < 0 || iy >= g.height as isize {
                        drow.fill(T::ZERO);
                        continue;
                    }
                    let src = &xc[iy as usize * g.width..(iy as usize + 1) * g.width];
                    drow[..lo].fill(T::ZERO);
                    drow[hi..].fill(T::ZERO);
                    let base = lo * s + kx - g.pad;
                    if s == 1 {
                        drow[lo..hi].copy_from_slice(&src[base..base + hi - lo]);
                    } else {
                        for (j, d) in drow[lo..hi].iter_mut().enumerate() {
                            *d = src[base + j * s];
                        }
                    }
                }
            }
        }
    }
}

/// Folds `cols` back onto `x`, accumulating overlapping contributions.
pub fn col2im<T: Real>(cols: &[T], g: &ConvGeometry, x: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.pad as isize);
    let plane = g.col_cols();
    for c in 0..g.channels {
        let xc = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_cols(g, kx);
                for oy in 0..g.out_height {
                    let iy = (oy * s + ky) as isize - p;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut xc[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let srow = &src[oy * g.out_width + lo..oy * g.out_width + hi];
                    let base = lo * s + kx - g.pad;
                    if s == 1 {
                        for (d, &v) in dst[base..base + hi - lo].iter_mut().zip(srow) {
                            *d += v;
                        }
                    } else {
                        for (j, &v) in srow.iter().enumerate() {
                            dst[base + j * s] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `out[O, Ho·Wo] = weight[O, C·k·k] · im2col(x) + bias`.
pub fn conv_forward<T: Real>(x: &[T], weight: &[T], bias: &[T], g: &ConvGeometry, out: &mut [T], scratch: &mut Vec<T>) {
    let out_ch = bias.len();
    let plane = g.col_cols();
    let cols: &[T] = if g.is_pointwise() {
        x
    } else {
        scratch.resize(g.col_rows() * plane, T::ZERO);
        im2col(x, g, scratch);
        scratch
    };
    for (o, &b) in bias.iter().enumerate() {
        out[o * plane..(o + 1) * plane].fill(b);
    }
    gemm(false, false, out_ch, plane, g.col_rows(), T::ONE, weight, cols, T::ONE, out);
}

/// Accumulates weight/bias gradients and (optionally) the input gradient of
/// [`conv_forward`].
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<T: Real>(
    x: &[T],
    weight: &[T],
    dout: &[T],
    g: &ConvGeometry,
    dx: Option<&mut [T]>,
    dweight: Option<&mut [T]>,
    dbias: Option<&mut [T]>,
    scratch: &mut Vec<T>,
) {
    let plane = g.col_cols();
    let rows = g.col_rows();
    let out_ch = dout.len() / plane;
    if let Some(db) = dbias {
        for (o, d) in db.iter_mut().enumerate() {
            *d += dout[o * plane..(o + 1) * plane].iter().copied().sum::<T>();
        }
    }
    if let Some(dw) = dweight {
        if g.is_pointwise() {
            gemm(false, true, out_ch, rows, plane, T::ONE, dout, x, T::ONE, dw);
        } else {
            scratch.resize(rows * plane, T::ZERO);
            im2col(x, g, scratch);
            gemm(false, true, out_ch, rows, plane, T::ONE, dout, scratch, T::ONE, dw);
        }
    }
    if let Some(dx) = dx {
        if g.is_pointwise() {
            gemm(true, false, rows, plane, out_ch, T::ONE, weight, dout, T::ONE, dx);
        } else {
            scratch.resize(rows * plane, T::ZERO);
            gemm(true, false, rows, plane, out_ch, T::ONE, weight, dout, T::ZERO, scratch);
            col2im(scratch, g, dx);
        }
    }
}

/// Transposed convolution: the adjoint of a forward convolution whose input
/// is the `[O, Ho, Wo]` output here and whose output is the `[C, H, W]` input.
/// `weight` is `[C, O·k·k]`.
pub fn conv_transpose_forward<T: Real>(x: &[T], weight: &[T], bias: &[T], g: &ConvGeometry, out: &mut [T], scratch: &mut Vec<T>) {
    // Here g describes the adjoint conv: channels = O, height/width = output
    // spatial size, out_height/out_width = input spatial size.
    let in_plane = g.col_cols();
    let rows = g.col_rows();
    let in_ch = x.len() / in_plane;
    scratch.resize(rows * in_plane, T::ZERO);
    gemm(true, false, rows, in_plane, in_ch, T::ONE, weight, x, T::ZERO, scratch);
    let out_plane = g.height * g.width;
    for (o, &b) in bias.iter().enumerate() {
        out[o * out_plane..(o + 1) * out_plane].fill(b);
    }
    col2im(scratch, g, out);
}

#[allow(clippy::too_many_arguments)]
pub fn conv_transpose_backward<T: Real>(
    x: &[T],
    weight: &[T],
    dout: &[T],
    g: &ConvGeometry,
    dx: Option<&mut [T]>,
    dweight: Option<&mut [T]>,
    dbias: Option<&mut [T]>,
    scratch: &mut Vec<T>,
) {
    let in_plane = g.col_cols();
    let rows = g.col_rows();
    let in_ch = x.len() / in_plane;
    let out_plane = g.height * g.width;
    if let Some(db) = dbias {
        for (o, d) in db.iter_mut().enumerate() {
            *d += dout[o * out_plane..(o + 1) * out_plane].iter().copied().sum::<T>();
        }
    }
    if dx.is_none() && dweight.is_none() {
        return;
    }
    scratch.resize(rows * in_plane, T::ZERO);
    im2col(dout, g, scratch);
    if let Some(dx) = dx {
        gemm(false, false, in_ch, in_plane, rows, T::ONE, weight, scratch, T::ONE, dx);
    }
    if let Some(dw) = dweight {
        gemm(false, true, in_ch, rows, in_plane, T::ONE, x, scratch, T::ONE, dw);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct_conv(x: &[f64], w: &[f64], b: &[f64], g: &ConvGeometry) -> Vec<f64> {
        let o_ch = b.len();
        let mut out = vec![0.0; o_ch * g.col_cols()];
        for o in 0..o_ch {
            for oy in 0..g.out_height {
                for ox in 0..g.out_width {
                    let mut acc = b[o];
                    for c in 0..g.channels {
                        for ky in 0..g.kernel {
                            for kx in 0..g.kernel {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= g.height as isize || ix >= g.width as isize {
                                    continue;
                                }
                                acc += x[(c * g.height + iy as usize) * g.width + ix as usize]
                                    * w[((o * g.channels + c) * g.kernel + ky) * g.kernel + kx];
                            }
                        }
                    }
                    out[(o * g.out_height + oy) * g.out_width + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn im2col_conv_matches_direct_loops() {
        for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (4, 0, 4)] {
            let g = ConvGeometry::forward(2, 8, 8, k, stride, pad).unwrap();
            let x: Vec<f64> = (0..2 * 64).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
            let w: Vec<f64> = (0..3 * g.col_rows()).map(|i| ((i * 3) % 5) as f64 * 0.1).collect();
            let b = vec![0.5, -0.25, 1.0];
            let mut out = vec![0.0; 3 * g.col_cols()];
            let mut scratch = Vec::new();
            conv_forward(&x, &w, &b, &g, &mut out, &mut scratch);
            for (a, b) in out.iter().zip(direct_conv(&x, &w, &b, &g)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeometry::forward(2, 5, 6, 3, 2, 1).unwrap();
        let x: Vec<f64> = (0..60).map(|i| (i as f64 * 0.3).sin()).collect();
        let y: Vec<f64> = (0..g.col_rows() * g.col_cols()).map(|i| (i as f64 * 0.7).cos()).collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, &g, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&y, &g, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
