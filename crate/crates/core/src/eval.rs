//! mIoU evaluation and latency benchmarking.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::resize::bilinear_forward;
use crate::labels::{LabelMap, IGNORE_INDEX};
use crate::model::Model;
use crate::nn::init_rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::augment::{normalize, AugmentConfig};
use crate::train::Dataset;

/// `K×K` pixel counts, rows indexed by ground truth and columns by prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
    pub pixel_accuracy: f64,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix { classes, counts: vec![0; classes * classes] }
    }

    /// Builds a matrix from row-major counts.
    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::invalid(
                "confusion matrix",
                format!("{classes} classes need {} counts", classes * classes),
            ));
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Number of non-ignored pixels seen so far.
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one count per pixel whose ground truth is not the ignore index.
    /// Nothing is recorded if any label is out of range.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(Error::dims("confusion matrix", &[pred.height, pred.width], &[gt.height, gt.width]));
        }
        let k = self.classes;
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            if g == IGNORE_INDEX {
                continue;
            }
            if g as usize >= k {
                return Err(Error::LabelOutOfRange { label: g, classes: k });
            }
            if p as usize >= k {
                return Err(Error::LabelOutOfRange { label: p, classes: k });
            }
        }
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            if g != IGNORE_INDEX {
                self.counts[g as usize * k + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::invalid(
                "confusion matrix",
                format!("cannot merge {} and {} classes", self.classes, other.classes),
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// `IoU_k = TP/(TP+FP+FN)`; the mean skips classes with an empty union.
    pub fn miou(&self) -> Result<MiouReport> {
        let k = self.classes;
        let per_class: Vec<Option<f64>> = (0..k)
            .map(|c| {
                let tp = self.get(c, c);
                let row: u64 = (0..k).map(|p| self.get(c, p)).sum();
                let col: u64 = (0..k).map(|g| self.get(g, c)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        if present.is_empty() {
            return Err(Error::EmptyUnion);
        }
        let correct: u64 = (0..k).map(|c| self.get(c, c)).sum();
        Ok(MiouReport {
            miou: present.iter().sum::<f64>() / present.len() as f64,
            pixel_accuracy: correct as f64 / self.total() as f64,
            per_class,
        })
    }
}

/// Predicts every dataset item (normalized with `norm`) on parallel workers,
/// each with a private matrix, merged at the end.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    dataset: &dyn Dataset<T>,
    norm: &AugmentConfig,
) -> Result<ConfusionMatrix> {
    let k = model.num_classes();
    let partial: Vec<ConfusionMatrix> = (0..dataset.len())
        .into_par_iter()
        .map(|i| {
            let sample = dataset.get(i)?;
            let pred = predict_image(model, &normalize(&sample.image, norm.mean, norm.std))?;
            let mut cm = ConfusionMatrix::new(k);
            cm.accumulate(&pred, &sample.label)?;
            Ok(cm)
        })
        .collect::<Result<_>>()?;
    let mut cm = ConfusionMatrix::new(k);
    for p in &partial {
        cm.merge(p)?;
    }
    Ok(cm)
}

/// Smallest multiple of 32 not below `v`.
pub fn round_up_32(v: usize) -> usize {
    v.div_ceil(32).max(1) * 32
}

/// Full inference protocol for one normalized `[3,H,W]` image: resize to
/// the next multiple of 32 (if needed), infer, resize the prediction back.
pub fn predict_image<T: Scalar>(model: &Model<T>, image: &Tensor<T>) -> Result<LabelMap> {
    let (h, w) = match image.shape() {
        &[3, h, w] | &[1, 3, h, w] => (h, w),
        s => return Err(Error::invalid("predict", format!("expected a [3,H,W] image, got {s:?}"))),
    };
    predict_resized(model, image, h, w, round_up_32(h), round_up_32(w))
}

fn predict_resized<T: Scalar>(
    model: &Model<T>,
    image: &Tensor<T>,
    h: usize,
    w: usize,
    ih: usize,
    iw: usize,
) -> Result<LabelMap> {
    let input = Tensor::from_parts(vec![1, 3, ih, iw], bilinear_forward(image.data(), 3, h, w, ih, iw));
    let pred = model.predict(&input)?.remove(0);
    Ok(pred.resize_nearest(h, w))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    /// Inference resolution `[H, W]` (multiples of 32).
    pub resolution: [usize; 2],
    /// Size of the synthetic "original" image; defaults to the inference size.
    pub source: Option<[usize; 2]>,
    pub warmup: usize,
    pub runs: usize,
    pub seed: u64,
}

impl BenchConfig {
    pub fn new(height: usize, width: usize) -> Self {
        BenchConfig { resolution: [height, width], source: None, warmup: 10, runs: 50, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub resolution: [usize; 2],
    pub source_resolution: [usize; 2],
    pub warmup_runs: usize,
    pub timed_runs: usize,
    pub timings_ms: Vec<f64>,
    pub mean_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub fps: f64,
    pub includes_resize: bool,
    pub parameter_count: usize,
}

/// Batch-1 latency of resize → infer → resize on a fixed random image.
pub fn bench<T: Scalar>(model: &Model<T>, cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.warmup < 1 || cfg.runs < 3 {
        return Err(Error::Config(format!(
            "bench needs warmup >= 1 and runs >= 3, got {} and {}",
            cfg.warmup, cfg.runs
        )));
    }
    let [ih, iw] = cfg.resolution;
    if ih == 0 || iw == 0 || ih % 32 != 0 || iw % 32 != 0 {
        return Err(Error::Config(format!("bench resolution {ih}x{iw} must be positive multiples of 32")));
    }
    let [sh, sw] = cfg.source.unwrap_or(cfg.resolution);
    let image = Tensor::<T>::rand_uniform(vec![3, sh, sw], -2.0, 2.0, &mut init_rng(cfg.seed));
    let run = || predict_resized(model, &image, sh, sw, ih, iw);
    for _ in 0..cfg.warmup {
        run()?;
    }
    let mut timings_ms = Vec::with_capacity(cfg.runs);
    for _ in 0..cfg.runs {
        let start = Instant::now();
        std::hint::black_box(run()?);
        timings_ms.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let mean_ms = timings_ms.iter().sum::<f64>() / timings_ms.len() as f64;
    Ok(BenchReport {
        resolution: cfg.resolution,
        source_resolution: [sh, sw],
        warmup_runs: cfg.warmup,
        timed_runs: cfg.runs,
        min_ms: timings_ms.iter().copied().fold(f64::INFINITY, f64::min),
        max_ms: timings_ms.iter().copied().fold(0.0, f64::max),
        fps: 1000.0 / mean_ms,
        mean_ms,
        timings_ms,
        includes_resize: true,
        parameter_count: model.parameter_count(),
    })
}
