//! Independent loop-based reference implementations used as test oracles.
#![allow(dead_code)]

use liteseg::tensor::Tensor;

pub fn idx(shape: &[usize], n: usize, c: usize, y: usize, x: usize) -> usize {
    ((n * shape[1] + c) * shape[2] + y) * shape[3] + x
}

/// Direct cross-correlation, one output element at a time.
pub fn conv2d(x: &Tensor<f64>, w: &Tensor<f64>, bias: Option<&[f64]>, stride: usize, pad: usize) -> Tensor<f64> {
    let (xs, ws) = (x.shape(), w.shape());
    let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * cout * oh * ow];
    for b in 0..n {
        for o in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |bb| bb[o]);
                    for c in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[idx(xs, b, c, iy as usize, ix as usize)]
                                    * w.data()[((o * cin + c) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((b * cout + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, cout, oh, ow], out).unwrap()
}

/// Bilinear sample of one plane at a continuous, half-pixel-centered source
/// position derived per destination pixel.
pub fn bilinear(x: &Tensor<f64>, oh: usize, ow: usize) -> Tensor<f64> {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let src = |d: usize, out: usize, inn: usize| -> f64 {
        let v = (d as f64 + 0.5) * (inn as f64 / out as f64) - 0.5;
        v.clamp(0.0, (inn - 1) as f64)
    };
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let (sy, sx) = (src(oy, oh, h), src(ox, ow, w));
                    let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                    let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                    let p = |y, xx| x.data()[idx(s, b, ch, y, xx)];
                    let v = p(y0, x0) * (1.0 - fy) * (1.0 - fx)
                        + p(y0, x1) * (1.0 - fy) * fx
                        + p(y1, x0) * fy * (1.0 - fx)
                        + p(y1, x1) * fy * fx;
                    out.push(v);
                }
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out).unwrap()
}

/// Region means with start = floor(i·L/bins), end = ceil((i+1)·L/bins).
pub fn adaptive_avg_pool(x: &Tensor<f64>, bh: usize, bw: usize) -> Tensor<f64> {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let start = |i: usize, bins: usize, len: usize| (i * len) / bins;
    let end = |i: usize, bins: usize, len: usize| ((i + 1) * len).div_ceil(bins);
    let mut out = Vec::new();
    for b in 0..n {
        for ch in 0..c {
            for i in 0..bh {
                for j in 0..bw {
                    let (y0, y1, x0, x1) = (start(i, bh, h), end(i, bh, h), start(j, bw, w), end(j, bw, w));
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            acc += x.data()[idx(s, b, ch, y, xx)];
                        }
                    }
                    out.push(acc / ((y1 - y0) * (x1 - x0)) as f64);
                }
            }
        }
    }
    Tensor::new(vec![n, c, bh, bw], out).unwrap()
}

/// Per-pixel mean and max over channels.
pub fn channel_mean_max(x: &Tensor<f64>) -> (Vec<f64>, Vec<f64>) {
    let s = x.shape();
    let (mut mean, mut max) = (Vec::new(), Vec::new());
    for b in 0..s[0] {
        for y in 0..s[2] {
            for xx in 0..s[3] {
                let vals: Vec<f64> = (0..s[1]).map(|c| x.data()[idx(s, b, c, y, xx)]).collect();
                mean.push(vals.iter().sum::<f64>() / vals.len() as f64);
                max.push(vals.iter().copied().fold(f64::NEG_INFINITY, f64::max));
            }
        }
    }
    (mean, max)
}

/// Per-channel spatial mean and max.
pub fn spatial_avg_max(x: &Tensor<f64>) -> (Vec<f64>, Vec<f64>) {
    let s = x.shape();
    let (mut avg, mut max) = (Vec::new(), Vec::new());
    for b in 0..s[0] {
        for c in 0..s[1] {
            let mut vals = Vec::new();
            for y in 0..s[2] {
                for xx in 0..s[3] {
                    vals.push(x.data()[idx(s, b, c, y, xx)]);
                }
            }
            avg.push(vals.iter().sum::<f64>() / vals.len() as f64);
            max.push(vals.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        }
    }
    (avg, max)
}

/// Per-pixel argmax; strict comparison keeps the lowest index on ties.
pub fn argmax(x: &Tensor<f64>) -> Vec<Vec<u8>> {
    let s = x.shape();
    (0..s[0])
        .map(|b| {
            let mut labels = Vec::new();
            for y in 0..s[2] {
                for xx in 0..s[3] {
                    let mut best = 0;
                    for c in 1..s[1] {
                        if x.data()[idx(s, b, c, y, xx)] > x.data()[idx(s, b, best, y, xx)] {
                            best = c;
                        }
                    }
                    labels.push(best as u8);
                }
            }
            labels
        })
        .collect()
}

/// Per-pixel softmax cross-entropy (`None` for ignored pixels), pixel order N,H,W.
pub fn pixel_ce(logits: &Tensor<f64>, labels: &[u8], ignore: u8) -> Vec<Option<f64>> {
    let s = logits.shape();
    let mut out = Vec::new();
    for b in 0..s[0] {
        for y in 0..s[2] {
            for xx in 0..s[3] {
                let p = (b * s[2] + y) * s[3] + xx;
                if labels[p] == ignore {
                    out.push(None);
                    continue;
                }
                let z: Vec<f64> = (0..s[1]).map(|c| logits.data()[idx(s, b, c, y, xx)]).collect();
                let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                out.push(Some(lse - z[labels[p] as usize]));
            }
        }
    }
    out
}

/// Counts `(gt, pred)` pairs into a K×K table, skipping the ignore label.
pub fn confusion(pred: &[u8], gt: &[u8], k: usize) -> Vec<u64> {
    let mut counts = vec![0u64; k * k];
    for i in 0..gt.len() {
        if gt[i] != 255 {
            counts[gt[i] as usize * k + pred[i] as usize] += 1;
        }
    }
    counts
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
