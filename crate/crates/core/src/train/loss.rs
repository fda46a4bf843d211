//! Cross-entropy with online hard example mining.

use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_nll, Graph, Var};
use crate::error::{Error, Result};
use crate::labels::IGNORE_INDEX;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OhemConfig {
    /// Pixels whose true-class probability is below this are "hard".
    #[serde(default = "default_threshold")]
    pub prob_threshold: f64,
    /// Minimum number of pixels kept per batch; `None` keeps one sixteenth
    /// of the batch pixels.
    #[serde(default)]
    pub min_kept: Option<usize>,
    #[serde(default = "default_ignore")]
    pub ignore_index: u8,
}

fn default_threshold() -> f64 {
    0.7
}

fn default_ignore() -> u8 {
    IGNORE_INDEX
}

impl Default for OhemConfig {
    fn default() -> Self {
        OhemConfig { prob_threshold: default_threshold(), min_kept: None, ignore_index: IGNORE_INDEX }
    }
}

impl OhemConfig {
    /// Mining disabled: every valid pixel is kept.
    pub fn disabled() -> Self {
        OhemConfig { prob_threshold: 1.0, min_kept: Some(usize::MAX), ignore_index: IGNORE_INDEX }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.prob_threshold > 0.0 && self.prob_threshold <= 1.0) {
            return Err(Error::Config(format!("ohem prob_threshold must lie in (0, 1], got {}", self.prob_threshold)));
        }
        if self.min_kept == Some(0) {
            return Err(Error::Config("ohem min_kept must be positive".into()));
        }
        Ok(())
    }

    fn min_kept_for(&self, batch_pixels: usize) -> usize {
        self.min_kept.unwrap_or((batch_pixels / 16).max(1))
    }
}

fn check_labels(labels: &[u8], classes: usize, ignore: u8) -> Result<()> {
    match labels.iter().find(|&&l| l != ignore && l as usize >= classes) {
        Some(&l) => {
            Err(Error::invalid("cross_entropy", format!("label {l} outside [0, {classes}) and not the ignore index")))
        }
        None => Ok(()),
    }
}

/// Which pixels the loss averages over. Returns a per-pixel weight that is
/// `1/kept` on kept pixels and zero elsewhere.
pub fn ohem_weights<T: Scalar>(logits: &Tensor<T>, labels: &[u8], cfg: &OhemConfig) -> Result<Vec<T>> {
    cfg.validate()?;
    let (_, k, _, _) = logits.dims4()?;
    check_labels(labels, k, cfg.ignore_index)?;
    let (probs, nll) = softmax_nll(logits, labels)?;
    let valid: Vec<usize> = (0..labels.len()).filter(|&p| labels[p] != cfg.ignore_index).collect();
    if valid.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let threshold = T::from_f64_lossy(cfg.prob_threshold);
    let mut kept: Vec<usize> =
        valid.iter().copied().filter(|&p| probs[p * k + labels[p] as usize] < threshold).collect();
    let min_kept = cfg.min_kept_for(labels.len()).min(valid.len());
    if kept.len() < min_kept {
        let mut order = valid;
        // Hardest first; ties keep pixel order.
        order.sort_by(|&a, &b| nll[b].partial_cmp(&nll[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
        order.truncate(min_kept);
        kept = order;
    }
    let w = T::one() / T::from_usize(kept.len()).unwrap();
    let mut weights = vec![T::zero(); labels.len()];
    for p in kept {
        weights[p] = w;
    }
    Ok(weights)
}

/// Mean softmax cross-entropy over the pixels selected by OHEM.
/// `labels` follow `[N,H,W]` order.
pub fn ohem_cross_entropy<T: Scalar>(g: &Graph<T>, logits: &Var<T>, labels: &[u8], cfg: &OhemConfig) -> Result<Var<T>> {
    let weights = ohem_weights(logits.value(), labels, cfg)?;
    g.softmax_cross_entropy(logits, labels, &weights)
}

/// Plain mean cross-entropy over every non-ignored pixel.
pub fn cross_entropy<T: Scalar>(g: &Graph<T>, logits: &Var<T>, labels: &[u8], ignore_index: u8) -> Result<Var<T>> {
    let (_, k, _, _) = logits.value().dims4()?;
    check_labels(labels, k, ignore_index)?;
    let valid = labels.iter().filter(|&&l| l != ignore_index).count();
    if valid == 0 {
        return Err(Error::EmptyBatch);
    }
    let w = T::one() / T::from_usize(valid).unwrap();
    let weights: Vec<T> = labels.iter().map(|&l| if l != ignore_index { w } else { T::zero() }).collect();
    g.softmax_cross_entropy(logits, labels, &weights)
}
