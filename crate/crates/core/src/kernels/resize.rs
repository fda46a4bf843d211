//! Bilinear and nearest resampling with half-pixel centers
//! (`align_corners = false`).

use crate::scalar::Scalar;

/// Source taps for one destination index along an axis.
#[derive(Debug, Clone, Copy)]
pub struct Tap<T> {
    pub lo: usize,
    pub hi: usize,
    pub frac: T,
}

/// `src = (dst + 0.5) * in/out - 0.5`, clamped to the valid range.
pub fn bilinear_taps<T: Scalar>(in_len: usize, out_len: usize) -> Vec<Tap<T>> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            Tap { lo, hi, frac: T::from_f64_lossy(frac) }
        })
        .collect()
}

#[inline]
fn lerp<T: Scalar>(a: T, b: T, t: T) -> T {
    a + t * (b - a)
}

/// Resamples every `[h,w]` plane of `x` (with `planes` planes) to `[oh,ow]`.
pub fn bilinear_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    if h == oh && w == ow {
        return x.to_vec();
    }
    let ty = bilinear_taps::<T>(h, oh);
    let tx = bilinear_taps::<T>(w, ow);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, ty) in ty.iter().enumerate() {
            let r0 = &src[ty.lo * w..(ty.lo + 1) * w];
            let r1 = &src[ty.hi * w..(ty.hi + 1) * w];
            let drow = &mut dst[oy * ow..(oy + 1) * ow];
            for (ox, tx) in tx.iter().enumerate() {
                let top = lerp(r0[tx.lo], r0[tx.hi], tx.frac);
                let bottom = lerp(r1[tx.lo], r1[tx.hi], tx.frac);
                drow[ox] = lerp(top, bottom, ty.frac);
            }
        }
    }
    out
}

pub fn bilinear_backward<T: Scalar>(gy: &[T], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    if h == oh && w == ow {
        return gy.to_vec();
    }
    let ty = bilinear_taps::<T>(h, oh);
    let tx = bilinear_taps::<T>(w, ow);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let g = &gy[p * oh * ow..(p + 1) * oh * ow];
        let d = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, ty) in ty.iter().enumerate() {
            let wy1 = ty.frac;
            let wy0 = T::one() - wy1;
            for (ox, tx) in tx.iter().enumerate() {
                let v = g[oy * ow + ox];
                let wx1 = tx.frac;
                let wx0 = T::one() - wx1;
                d[ty.lo * w + tx.lo] += v * wy0 * wx0;
                d[ty.lo * w + tx.hi] += v * wy0 * wx1;
                d[ty.hi * w + tx.lo] += v * wy1 * wx0;
                d[ty.hi * w + tx.hi] += v * wy1 * wx1;
            }
        }
    }
    dx
}

/// Nearest-neighbor source index with half-pixel centers.
pub fn nearest_index(dst: usize, in_len: usize, out_len: usize) -> usize {
    (((dst as f64 + 0.5) * in_len as f64 / out_len as f64).floor() as usize).min(in_len - 1)
}

/// Nearest-neighbor resampling of a single-plane label map.
pub fn nearest_u8(x: &[u8], h: usize, w: usize, oh: usize, ow: usize) -> Vec<u8> {
    let xs: Vec<usize> = (0..ow).map(|d| nearest_index(d, w, ow)).collect();
    let mut out = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        let sy = nearest_index(oy, h, oh);
        let row = &x[sy * w..(sy + 1) * w];
        out.extend(xs.iter().map(|&sx| row[sx]));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taps_at_2x() {
        let t = bilinear_taps::<f64>(2, 4);
        // src = -0.25 (clamped 0), 0.25, 0.75, 1.25 (clamped hi)
        assert_eq!((t[0].lo, t[0].hi, t[0].frac), (0, 1, 0.0));
        assert_eq!((t[1].lo, t[1].hi, t[1].frac), (0, 1, 0.25));
        assert_eq!((t[2].lo, t[2].hi, t[2].frac), (0, 1, 0.75));
        assert_eq!((t[3].lo, t[3].hi), (1, 1));
    }

    #[test]
    fn nearest_identity_and_double() {
        let x: Vec<u8> = vec![1, 2, 3, 4];
        assert_eq!(nearest_u8(&x, 2, 2, 2, 2), x);
        assert_eq!(nearest_u8(&x, 2, 2, 4, 4), vec![1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4]);
    }
}
