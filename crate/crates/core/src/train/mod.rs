//! Desk-scale training: OHEM loss, SGD with momentum, poly schedule,
//! augmentation and deterministic data.

pub mod augment;
pub mod dataset;
pub mod loss;
pub mod optim;
pub mod schedule;

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::{Mode, Session};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use augment::{augment, AugmentConfig, Sample};
pub use dataset::{item_rng, Dataset, ManifestDataset, SyntheticShapes};
pub use loss::{cross_entropy, ohem_cross_entropy, OhemConfig};
pub use optim::{Sgd, SgdConfig};
pub use schedule::{poly_lr, ScheduleConfig};

/// Salt separating the epoch-shuffle streams from the augmentation streams.
const SHUFFLE_SALT: u64 = 0x5EED_5A17_0000_0001;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub iters: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    #[serde(default = "default_power")]
    pub power: f64,
    /// Warm-up length; `None` means 1% of `iters`.
    #[serde(default)]
    pub warmup_iters: Option<usize>,
    #[serde(default = "default_warmup_start")]
    pub warmup_start_factor: f64,
    #[serde(default)]
    pub optimizer: SgdConfig,
    #[serde(default)]
    pub ohem: OhemConfig,
    pub augment: AugmentConfig,
    #[serde(default)]
    pub seed: u64,
}

fn default_power() -> f64 {
    0.9
}

fn default_warmup_start() -> f64 {
    0.1
}

impl TrainOptions {
    /// Toy recipe for 64×128 synthetic shapes.
    pub fn desk(iters: usize) -> Self {
        TrainOptions {
            iters,
            batch_size: 8,
            base_lr: 0.08,
            power: default_power(),
            warmup_iters: None,
            warmup_start_factor: default_warmup_start(),
            optimizer: SgdConfig::default(),
            ohem: OhemConfig::default(),
            augment: AugmentConfig::desk(64, 128),
            seed: 0,
        }
    }

    /// `None` when `iters == 0` (no schedule is needed).
    pub fn schedule(&self) -> Option<ScheduleConfig> {
        (self.iters > 0).then(|| ScheduleConfig {
            base_lr: self.base_lr,
            max_iters: self.iters,
            power: self.power,
            warmup_iters: self.warmup_iters.unwrap_or(self.iters / 100),
            warmup_start_factor: self.warmup_start_factor,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if let Some(s) = self.schedule() {
            s.validate()?;
        }
        self.ohem.validate()?;
        self.augment.validate()
    }
}

/// Where training samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataConfig {
    Synthetic {
        num_samples: usize,
        #[serde(default)]
        seed: u64,
    },
    Manifest {
        path: PathBuf,
    },
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic { num_samples: 256, seed: 0 }
    }
}

/// Complete training job as read from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(flatten)]
    pub options: TrainOptions,
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text)?;
        cfg.model.validate()?;
        cfg.options.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport<T> {
    pub records: Vec<LossRecord>,
    pub optimizer: Sgd<T>,
}

impl<T> TrainReport<T> {
    /// Loss curve as `iter,lr,loss` CSV with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,lr,loss\n");
        for r in &self.records {
            writeln!(out, "{},{:e},{:e}", r.iter, r.lr, r.loss).unwrap();
        }
        out
    }

    pub fn mean_loss(&self, range: std::ops::Range<usize>) -> f64 {
        let slice = &self.records[range];
        slice.iter().map(|r| r.loss).sum::<f64>() / slice.len() as f64
    }
}

/// Dataset indices drawn at global positions `start..start+len`: each epoch
/// is a seeded permutation.
pub fn batch_indices(len: usize, seed: u64, start: usize, count: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(count);
    let mut cached: Option<(usize, Vec<usize>)> = None;
    for pos in start..start + count {
        let epoch = pos / len;
        if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut perm: Vec<usize> = (0..len).collect();
            perm.shuffle(&mut item_rng(seed ^ SHUFFLE_SALT, epoch as u64));
            cached = Some((epoch, perm));
        }
        out.push(cached.as_ref().unwrap().1[pos % len]);
    }
    out
}

/// Augmented, normalized batch for global draw positions starting at `start`.
pub fn make_batch<T: Scalar>(
    dataset: &dyn Dataset<T>,
    opts: &TrainOptions,
    start: usize,
) -> Result<(Tensor<T>, Vec<u8>)> {
    let indices = batch_indices(dataset.len(), opts.seed, start, opts.batch_size);
    let samples: Vec<Sample<T>> = indices
        .par_iter()
        .enumerate()
        .map(|(slot, &idx)| {
            let raw = dataset.get(idx)?;
            Ok(augment(&raw, &opts.augment, &mut item_rng(opts.seed, (start + slot) as u64)))
        })
        .collect::<Result<_>>()?;
    let images: Vec<Tensor<T>> = samples.iter().map(|s| s.image.clone()).collect();
    let labels = samples.into_iter().flat_map(|s| s.label.data).collect();
    Ok((Tensor::stack(&images)?, labels))
}

fn diverged(iter: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { .. } | Error::NonFiniteGradient(_) => Error::Diverged { iter, cause: e.to_string() },
        other => other,
    }
}

/// One optimization step on a prepared batch; returns the loss before the
/// update.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    optimizer: &mut Sgd<T>,
    images: &Tensor<T>,
    labels: &[u8],
    ohem: &OhemConfig,
    lr: f64,
) -> Result<f64> {
    let g = Graph::new();
    let (loss, grads, updates) = {
        let s = Session::new(&g, &model.params, Mode::Train);
        let x = g.constant(images.clone());
        let logits = model.forward(&s, &x)?;
        let loss = ohem_cross_entropy(&g, &logits, labels, ohem)?;
        g.backward(&loss)?;
        (loss.value().data()[0].as_f64(), s.param_grads(), s.take_stat_updates())
    };
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "loss" });
    }
    model.params.zero_grad();
    for (id, grad) in grads {
        model.params.add_grad(id, grad.data());
    }
    optimizer.step(&mut model.params, lr)?;
    model.params.apply_stat_updates(updates);
    Ok(loss)
}

/// Runs `opts.iters` SGD steps. `on_iter` sees each record as it is produced.
/// With `iters == 0` the model is left untouched.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    dataset: &dyn Dataset<T>,
    opts: &TrainOptions,
    mut on_iter: impl FnMut(&LossRecord),
) -> Result<TrainReport<T>> {
    opts.validate()?;
    let mut optimizer = Sgd::new(opts.optimizer.clone());
    let mut records = Vec::with_capacity(opts.iters);
    let Some(schedule) = opts.schedule() else {
        return Ok(TrainReport { records, optimizer });
    };
    if dataset.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    if dataset.num_classes() != model.num_classes() {
        return Err(Error::Config(format!(
            "dataset has {} classes but the model predicts {}",
            dataset.num_classes(),
            model.num_classes()
        )));
    }
    for iter in 0..opts.iters {
        let lr = schedule.lr(iter);
        let (images, labels) = make_batch(dataset, opts, iter * opts.batch_size)?;
        let loss =
            train_step(model, &mut optimizer, &images, &labels, &opts.ohem, lr).map_err(|e| diverged(iter, e))?;
        let record = LossRecord { iter, lr, loss };
        on_iter(&record);
        records.push(record);
    }
    Ok(TrainReport { records, optimizer })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_each_epoch() {
        let idx = batch_indices(10, 3, 0, 20);
        let mut first: Vec<usize> = idx[..10].to_vec();
        first.sort_unstable();
        assert_eq!(first, (0..10).collect::<Vec<_>>());
        assert_eq!(batch_indices(10, 3, 7, 5), idx[7..12].to_vec());
    }

    #[test]
    fn config_json_round_trip() {
        let cfg =
            TrainConfig { model: ModelConfig::tiny(4), data: DataConfig::default(), options: TrainOptions::desk(10) };
        let back = TrainConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        let minimal = r#"{"model": {"encoder": "encoder-tiny", "decoder_channels": [16, 32, 64], "num_classes": 4,
            "sppm_inter_channels": 64, "sppm_out_channels": 64},
            "iters": 5, "batch_size": 2, "base_lr": 0.01,
            "augment": {"scale_range": [1.0, 1.0], "crop": [64, 128]}}"#;
        let cfg = TrainConfig::from_json(minimal).unwrap();
        assert_eq!(cfg.options.optimizer.momentum, 0.9);
        assert_eq!(cfg.data, DataConfig::Synthetic { num_samples: 256, seed: 0 });
    }
}
