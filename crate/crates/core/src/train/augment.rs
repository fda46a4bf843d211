//! Training-time augmentation of image/label pairs.
//!
//! Images are `[3,H,W]` tensors with raw intensities in `[0, 1]`; the final
//! step normalizes them with per-channel mean and std.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::resize::bilinear_forward;
use crate::labels::{LabelMap, IGNORE_INDEX};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// An image `[3,H,W]` with its aligned label map.
#[derive(Debug, Clone)]
pub struct Sample<T> {
    pub image: Tensor<T>,
    pub label: LabelMap,
}

impl<T: Scalar> Sample<T> {
    pub fn new(image: Tensor<T>, label: LabelMap) -> Result<Self> {
        match image.shape() {
            &[3, h, w] if h == label.height && w == label.width => Ok(Sample { image, label }),
            s => Err(Error::invalid(
                "sample",
                format!("image {s:?} does not match a 3-channel {}x{} label map", label.height, label.width),
            )),
        }
    }

    pub fn height(&self) -> usize {
        self.label.height
    }

    pub fn width(&self) -> usize {
        self.label.width
    }

    pub fn hflip(&self) -> Self {
        let w = self.width();
        let mut data = self.image.to_vec();
        for row in data.chunks_mut(w) {
            row.reverse();
        }
        Sample { image: Tensor::from_parts(self.image.shape().to_vec(), data), label: self.label.hflip() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub scale_range: [f64; 2],
    /// Crop size as `[height, width]`.
    pub crop: [usize; 2],
    #[serde(default = "default_flip")]
    pub hflip_prob: f64,
    #[serde(default = "default_jitter")]
    pub brightness: f64,
    #[serde(default = "default_jitter")]
    pub contrast: f64,
    #[serde(default = "default_jitter")]
    pub saturation: f64,
    #[serde(default = "default_mean")]
    pub mean: [f64; 3],
    #[serde(default = "default_std")]
    pub std: [f64; 3],
}

fn default_flip() -> f64 {
    0.5
}

fn default_jitter() -> f64 {
    0.4
}

fn default_mean() -> [f64; 3] {
    IMAGENET_MEAN
}

fn default_std() -> [f64; 3] {
    IMAGENET_STD
}

impl AugmentConfig {
    /// Cityscapes recipe: scale in [0.125, 1.5], 1024×512 crops, ±0.4 jitter.
    pub fn cityscapes() -> Self {
        AugmentConfig {
            scale_range: [0.125, 1.5],
            crop: [512, 1024],
            hflip_prob: default_flip(),
            brightness: default_jitter(),
            contrast: default_jitter(),
            saturation: default_jitter(),
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }

    /// Mild scaling around 1.0 for small synthetic images. Color jitter is
    /// off: in the synthetic shapes data color carries class information.
    pub fn desk(height: usize, width: usize) -> Self {
        AugmentConfig {
            scale_range: [0.75, 1.5],
            crop: [height, width],
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            ..Self::cityscapes()
        }
    }

    /// No geometric or photometric change: only normalization.
    pub fn identity(height: usize, width: usize) -> Self {
        AugmentConfig {
            scale_range: [1.0, 1.0],
            hflip_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            ..Self::desk(height, width)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!("scale_range must satisfy 0 < lo <= hi, got {:?}", self.scale_range)));
        }
        if self.crop.iter().any(|&c| c == 0 || c % 32 != 0) {
            return Err(Error::Config(format!("crop {:?} must be positive multiples of 32", self.crop)));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::Config("hflip_prob must lie in [0, 1]".into()));
        }
        if [self.brightness, self.contrast, self.saturation].iter().any(|m| !(0.0..1.0).contains(m)) {
            return Err(Error::Config("jitter magnitudes must lie in [0, 1)".into()));
        }
        if self.std.iter().any(|&s| s <= 0.0) {
            return Err(Error::Config("normalization std must be positive".into()));
        }
        Ok(())
    }
}

fn resize_image<T: Scalar>(image: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    Tensor::from_parts(vec![c, oh, ow], bilinear_forward(image.data(), c, h, w, oh, ow))
}

/// Rescales image (bilinear) and label (nearest) together.
pub fn rescale<T: Scalar>(sample: &Sample<T>, height: usize, width: usize) -> Sample<T> {
    Sample { image: resize_image(&sample.image, height, width), label: sample.label.resize_nearest(height, width) }
}

/// Pads bottom/right up to at least `min_h`×`min_w`: image channels with
/// `fill[c]`, labels with the ignore index.
pub fn pad_to<T: Scalar>(sample: &Sample<T>, min_h: usize, min_w: usize, fill: [f64; 3]) -> Sample<T> {
    let (h, w) = (sample.height(), sample.width());
    let (ph, pw) = (h.max(min_h), w.max(min_w));
    if (ph, pw) == (h, w) {
        return sample.clone();
    }
    let src = sample.image.data();
    let mut img = Vec::with_capacity(3 * ph * pw);
    for (c, &f) in fill.iter().enumerate() {
        let f = T::from_f64_lossy(f);
        for y in 0..ph {
            for x in 0..pw {
                img.push(if y < h && x < w { src[(c * h + y) * w + x] } else { f });
            }
        }
    }
    let mut lab = vec![IGNORE_INDEX; ph * pw];
    for y in 0..h {
        lab[y * pw..y * pw + w].copy_from_slice(&sample.label.data[y * w..(y + 1) * w]);
    }
    Sample { image: Tensor::from_parts(vec![3, ph, pw], img), label: LabelMap { height: ph, width: pw, data: lab } }
}

pub fn crop<T: Scalar>(sample: &Sample<T>, y0: usize, x0: usize, ch: usize, cw: usize) -> Sample<T> {
    let (h, w) = (sample.height(), sample.width());
    debug_assert!(y0 + ch <= h && x0 + cw <= w);
    let src = sample.image.data();
    let mut img = Vec::with_capacity(3 * ch * cw);
    for c in 0..3 {
        for y in y0..y0 + ch {
            let row = (c * h + y) * w;
            img.extend_from_slice(&src[row + x0..row + x0 + cw]);
        }
    }
    let mut lab = Vec::with_capacity(ch * cw);
    for y in y0..y0 + ch {
        lab.extend_from_slice(&sample.label.data[y * w + x0..y * w + x0 + cw]);
    }
    Sample { image: Tensor::from_parts(vec![3, ch, cw], img), label: LabelMap { height: ch, width: cw, data: lab } }
}

/// Brightness, contrast and saturation factors applied in that order;
/// results are clamped to `[0, 1]`.
pub fn color_jitter<T: Scalar>(image: &Tensor<T>, brightness: f64, contrast: f64, saturation: f64) -> Tensor<T> {
    let hw = image.shape()[1] * image.shape()[2];
    let mut v: Vec<f64> = image.data().iter().map(|x| x.as_f64() * brightness).collect();
    let gray = |v: &[f64], i: usize| 0.299 * v[i] + 0.587 * v[hw + i] + 0.114 * v[2 * hw + i];
    let mean_gray = (0..hw).map(|i| gray(&v, i)).sum::<f64>() / hw as f64;
    for x in &mut v {
        *x = (*x - mean_gray) * contrast + mean_gray;
    }
    for i in 0..hw {
        let g = gray(&v, i);
        for c in 0..3 {
            v[c * hw + i] = g + (v[c * hw + i] - g) * saturation;
        }
    }
    Tensor::from_parts(image.shape().to_vec(), v.into_iter().map(|x| T::from_f64_lossy(x.clamp(0.0, 1.0))).collect())
}

/// `(x - mean[c]) / std[c]` per channel.
pub fn normalize<T: Scalar>(image: &Tensor<T>, mean: [f64; 3], std: [f64; 3]) -> Tensor<T> {
    let hw = image.shape()[1] * image.shape()[2];
    let data = image
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let c = i / hw;
            T::from_f64_lossy((x.as_f64() - mean[c]) / std[c])
        })
        .collect();
    Tensor::from_parts(image.shape().to_vec(), data)
}

fn factor<R: Rng + ?Sized>(rng: &mut R, magnitude: f64) -> f64 {
    if magnitude == 0.0 {
        1.0
    } else {
        rng.random_range(1.0 - magnitude..=1.0 + magnitude)
    }
}

/// Scale → pad → crop → flip → jitter → normalize. Geometric steps move the
/// label with the image; jitter and normalization touch the image only.
pub fn augment<T: Scalar, R: Rng + ?Sized>(sample: &Sample<T>, cfg: &AugmentConfig, rng: &mut R) -> Sample<T> {
    let [lo, hi] = cfg.scale_range;
    let s = if lo == hi { lo } else { rng.random_range(lo..=hi) };
    let sh = ((sample.height() as f64 * s).round() as usize).max(1);
    let sw = ((sample.width() as f64 * s).round() as usize).max(1);
    let scaled = rescale(sample, sh, sw);
    let [ch, cw] = cfg.crop;
    let padded = pad_to(&scaled, ch, cw, cfg.mean);
    let y0 = rng.random_range(0..=padded.height() - ch);
    let x0 = rng.random_range(0..=padded.width() - cw);
    let mut out = crop(&padded, y0, x0, ch, cw);
    if cfg.hflip_prob > 0.0 && rng.random_bool(cfg.hflip_prob) {
        out = out.hflip();
    }
    let (b, c, sat) = (factor(rng, cfg.brightness), factor(rng, cfg.contrast), factor(rng, cfg.saturation));
    if (b, c, sat) != (1.0, 1.0, 1.0) {
        out.image = color_jitter(&out.image, b, c, sat);
    }
    out.image = normalize(&out.image, cfg.mean, cfg.std);
    out
}

/// Evaluation preprocessing: normalization only.
pub fn eval_transform<T: Scalar>(sample: &Sample<T>, cfg: &AugmentConfig) -> Sample<T> {
    Sample { image: normalize(&sample.image, cfg.mean, cfg.std), label: sample.label.clone() }
}
