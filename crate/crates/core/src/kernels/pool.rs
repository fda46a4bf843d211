//! Adaptive average pooling and global spatial reductions.

use crate::scalar::Scalar;

/// Input span `[start, end)` covered by output bin `i` of `bins` over `len`:
/// `start = floor(i*len/bins)`, `end = ceil((i+1)*len/bins)`.
pub fn bin_span(i: usize, bins: usize, len: usize) -> (usize, usize) {
    let start = i * len / bins;
    let end = ((i + 1) * len).div_ceil(bins);
    (start, end)
}

pub fn adaptive_avg_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, bh: usize, bw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); planes * bh * bw];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for by in 0..bh {
            let (y0, y1) = bin_span(by, bh, h);
            for bx in 0..bw {
                let (x0, x1) = bin_span(bx, bw, w);
                let mut s = T::zero();
                for y in y0..y1 {
                    for v in &src[y * w + x0..y * w + x1] {
                        s += *v;
                    }
                }
                let count = T::from_usize((y1 - y0) * (x1 - x0)).unwrap();
                out[(p * bh + by) * bw + bx] = s / count;
            }
        }
    }
    out
}

pub fn adaptive_avg_backward<T: Scalar>(gy: &[T], planes: usize, h: usize, w: usize, bh: usize, bw: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let d = &mut dx[p * h * w..(p + 1) * h * w];
        for by in 0..bh {
            let (y0, y1) = bin_span(by, bh, h);
            for bx in 0..bw {
                let (x0, x1) = bin_span(bx, bw, w);
                let count = T::from_usize((y1 - y0) * (x1 - x0)).unwrap();
                let g = gy[(p * bh + by) * bw + bx] / count;
                for y in y0..y1 {
                    for v in &mut d[y * w + x0..y * w + x1] {
                        *v += g;
                    }
                }
            }
        }
    }
    dx
}

/// Per-plane mean and max over all `len` elements; also returns the first
/// argmax index of each plane.
pub fn plane_mean_max<T: Scalar>(x: &[T], planes: usize, len: usize) -> (Vec<T>, Vec<T>, Vec<usize>) {
    let count = T::from_usize(len).unwrap();
    let mut mean = Vec::with_capacity(planes);
    let mut max = Vec::with_capacity(planes);
    let mut arg = Vec::with_capacity(planes);
    for p in 0..planes {
        let s = &x[p * len..(p + 1) * len];
        let mut best = 0;
        for (i, v) in s.iter().enumerate() {
            if *v > s[best] {
                best = i;
            }
        }
        mean.push(s.iter().copied().sum::<T>() / count);
        max.push(s[best]);
        arg.push(best);
    }
    (mean, max, arg)
}

/// Mean and max across channels at each pixel of a `[N,C,H,W]` buffer.
/// Returns `[N,1,H,W]` mean, max and the winning channel per pixel.
pub fn channel_mean_max<T: Scalar>(x: &[T], n: usize, c: usize, hw: usize) -> (Vec<T>, Vec<T>, Vec<u32>) {
    let count = T::from_usize(c).unwrap();
    let mut mean = vec![T::zero(); n * hw];
    let mut max = vec![T::zero(); n * hw];
    let mut arg = vec![0u32; n * hw];
    for b in 0..n {
        let base = b * c * hw;
        let m = &mut mean[b * hw..(b + 1) * hw];
        let mx = &mut max[b * hw..(b + 1) * hw];
        let a = &mut arg[b * hw..(b + 1) * hw];
        m.copy_from_slice(&x[base..base + hw]);
        mx.copy_from_slice(&x[base..base + hw]);
        for ch in 1..c {
            let plane = &x[base + ch * hw..base + (ch + 1) * hw];
            for i in 0..hw {
                m[i] += plane[i];
                if plane[i] > mx[i] {
                    mx[i] = plane[i];
                    a[i] = ch as u32;
                }
            }
        }
        for v in m.iter_mut() {
            *v /= count;
        }
    }
    (mean, max, arg)
}
