//! 2-D cross-correlation via im2col + GEMM.

use crate::error::{Error, Result};
use crate::scalar::{gemm, MatRef, Scalar};

/// Resolved geometry of one convolution call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(x_shape: &[usize], w_shape: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let (&[n, c, h, w], &[oc, ic, kh, kw]) = (x_shape, w_shape) else {
            return Err(Error::dims("conv2d", x_shape, w_shape));
        };
        if c != ic {
            return Err(Error::dims("conv2d", x_shape, w_shape));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        if kh == 0 || kw == 0 || kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::dims("conv2d", x_shape, w_shape));
        }
        Ok(ConvGeom {
            batch: n,
            in_channels: c,
            height: h,
            width: w,
            out_channels: oc,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_channels, self.out_h, self.out_w]
    }

    /// Rows of the unfolded patch matrix.
    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }

    /// Valid output range along one axis for kernel offset `k`: outputs `o`
    /// with `0 <= o*stride + k - pad < len`.
    fn valid_range(&self, k: usize, len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride;
        let p = self.padding;
        let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
        // o*s + k - p <= len - 1  =>  o <= (len - 1 + p - k) / s
        let hi = if len + p > k { ((len - 1 + p - k) / s + 1).min(out_len) } else { 0 };
        (lo, hi.max(lo))
    }
}

/// Unfolds one sample `[C,H,W]` into `cols[C*kh*kw, oh*ow]`.
fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let p = g.positions();
    for c in 0..g.in_channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            let (oy0, oy1) = g.valid_range(ky, g.height, g.out_h);
            for kx in 0..g.kernel_w {
                let (ox0, ox1) = g.valid_range(kx, g.width, g.out_w);
                let row = ((c * g.kernel_h + ky) * g.kernel_w + kx) * p;
                let dst = &mut cols[row..row + p];
                dst.fill(T::zero());
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.padding;
                    let src_row = &plane[iy * g.width..(iy + 1) * g.width];
                    let drow = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    for ox in ox0..ox1 {
                        drow[ox] = src_row[ox * g.stride + kx - g.padding];
                    }
                }
            }
        }
    }
}

/// Folds `cols` back into a `[C,H,W]` gradient, accumulating overlaps.
fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let p = g.positions();
    for c in 0..g.in_channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            let (oy0, oy1) = g.valid_range(ky, g.height, g.out_h);
            for kx in 0..g.kernel_w {
                let (ox0, ox1) = g.valid_range(kx, g.width, g.out_w);
                let row = ((c * g.kernel_h + ky) * g.kernel_w + kx) * p;
                let src = &cols[row..row + p];
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.padding;
                    for ox in ox0..ox1 {
                        plane[iy * g.width + ox * g.stride + kx - g.padding] += src[oy * g.out_w + ox];
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], weight: &[T], bias: Option<&[T]>) -> Vec<T> {
    let k = g.patch_len();
    let p = g.positions();
    let in_plane = g.in_channels * g.height * g.width;
    let out_plane = g.out_channels * p;
    let mut out = vec![T::zero(); g.batch * out_plane];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    for n in 0..g.batch {
        let xs = &x[n * in_plane..(n + 1) * in_plane];
        let patches: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(g, xs, &mut cols);
            &cols
        };
        let ys = &mut out[n * out_plane..(n + 1) * out_plane];
        gemm(g.out_channels, k, p, T::one(), MatRef::rows(weight, k), MatRef::rows(patches, p), T::zero(), ys);
        if let Some(b) = bias {
            for (oc, row) in ys.chunks_mut(p).enumerate() {
                for v in row {
                    *v += b[oc];
                }
            }
        }
    }
    out
}

/// Gradients of a convolution. Each output is computed only when requested.
pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    grad_out: &[T],
    want_input: bool,
    want_weight: bool,
    want_bias: bool,
) -> ConvGrads<T> {
    let k = g.patch_len();
    let p = g.positions();
    let in_plane = g.in_channels * g.height * g.width;
    let out_plane = g.out_channels * p;

    let mut dx = want_input.then(|| vec![T::zero(); g.batch * in_plane]);
    let mut dw = want_weight.then(|| vec![T::zero(); g.out_channels * k]);
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { k * p }];
    let mut dcols = vec![T::zero(); if want_input && !g.is_pointwise() { k * p } else { 0 }];

    for n in 0..g.batch {
        let gy = &grad_out[n * out_plane..(n + 1) * out_plane];
        if let Some(dw) = dw.as_mut() {
            let xs = &x[n * in_plane..(n + 1) * in_plane];
            let patches: &[T] = if g.is_pointwise() {
                xs
            } else {
                im2col(g, xs, &mut cols);
                &cols
            };
            gemm(g.out_channels, p, k, T::one(), MatRef::rows(gy, p), MatRef::transposed(patches, p), T::one(), dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[n * in_plane..(n + 1) * in_plane];
            if g.is_pointwise() {
                gemm(
                    k,
                    g.out_channels,
                    p,
                    T::one(),
                    MatRef::transposed(weight, k),
                    MatRef::rows(gy, p),
                    T::zero(),
                    dxs,
                );
            } else {
                gemm(
                    k,
                    g.out_channels,
                    p,
                    T::one(),
                    MatRef::transposed(weight, k),
                    MatRef::rows(gy, p),
                    T::zero(),
                    &mut dcols,
                );
                col2im(g, &dcols, dxs);
            }
        }
    }

    let db = want_bias.then(|| {
        let mut db = vec![T::zero(); g.out_channels];
        for n in 0..g.batch {
            for (oc, row) in grad_out[n * out_plane..(n + 1) * out_plane].chunks(p).enumerate() {
                db[oc] += row.iter().copied().sum::<T>();
            }
        }
        db
    });

    ConvGrads { input: dx, weight: dw, bias: db }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(x: &[f64], xs: [usize; 4], w: &[f64], ws: [usize; 4], stride: usize, pad: usize) -> Vec<f64> {
        let [n, c, h, wd] = xs;
        let [oc, _, kh, kw] = ws;
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; n * oc * oh * ow];
        for b in 0..n {
            for o in 0..oc {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut s = 0.0;
                        for ci in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (y * stride + ky) as isize - pad as isize;
                                    let ix = (xx * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    s += x[((b * c + ci) * h + iy as usize) * wd + ix as usize]
                                        * w[((o * c + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        out[((b * oc + o) * oh + y) * ow + xx] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn strided_padded_matches_loops() {
        for &(stride, pad, k) in &[(1, 0, 3), (2, 1, 3), (2, 0, 1), (3, 2, 2), (1, 1, 1)] {
            let xs = [2, 3, 7, 6];
            let ws = [4, 3, k, k];
            let x: Vec<f64> = (0..xs.iter().product()).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
            let w: Vec<f64> = (0..ws.iter().product()).map(|i| ((i * 13 % 7) as f64) * 0.25 - 0.5).collect();
            let g = ConvGeom::new(&xs, &ws, stride, pad).unwrap();
            let got = conv2d_forward(&g, &x, &w, None);
            let want = naive(&x, xs, &w, ws, stride, pad);
            assert_eq!(got.len(), want.len());
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-9, "stride {stride} pad {pad} k {k}");
            }
        }
    }

    #[test]
    fn geometry_errors() {
        assert!(ConvGeom::new(&[1, 3, 4, 4], &[2, 2, 3, 3], 1, 1).is_err());
        assert!(ConvGeom::new(&[1, 1, 2, 2], &[1, 1, 5, 5], 1, 0).is_err());
        let g = ConvGeom::new(&[1, 1, 9, 9], &[1, 1, 3, 3], 2, 1).unwrap();
        assert_eq!((g.out_h, g.out_w), (5, 5));
    }
}
