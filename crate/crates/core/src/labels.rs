//! Per-pixel class label maps.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Label value excluded from loss and evaluation.
pub const IGNORE_INDEX: u8 = 255;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::invalid(
                "label map",
                format!("{height}x{width} map needs {} labels, got {}", height * width, data.len()),
            ));
        }
        Ok(LabelMap { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        LabelMap { height, width, data: vec![value; height * width] }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Nearest-neighbor resize (half-pixel centers).
    pub fn resize_nearest(&self, height: usize, width: usize) -> LabelMap {
        LabelMap {
            height,
            width,
            data: crate::kernels::resize::nearest_u8(&self.data, self.height, self.width, height, width),
        }
    }

    pub fn hflip(&self) -> LabelMap {
        let mut data = self.data.clone();
        for row in data.chunks_mut(self.width) {
            row.reverse();
        }
        LabelMap { data, ..*self }
    }
}

/// Per-pixel argmax over the class axis of `[N,K,H,W]` logits.
/// Ties resolve to the lowest class index.
pub fn argmax<T: Scalar>(logits: &Tensor<T>) -> Result<Vec<LabelMap>> {
    let (n, k, h, w) = logits.dims4()?;
    if k == 0 || k > 255 {
        return Err(Error::invalid("argmax", format!("class count {k} not representable as a label")));
    }
    let hw = h * w;
    let d = logits.data();
    Ok((0..n)
        .map(|b| {
            let base = b * k * hw;
            let mut best: Vec<T> = d[base..base + hw].to_vec();
            let mut label = vec![0u8; hw];
            for c in 1..k {
                let plane = &d[base + c * hw..base + (c + 1) * hw];
                for i in 0..hw {
                    if plane[i] > best[i] {
                        best[i] = plane[i];
                        label[i] = c as u8;
                    }
                }
            }
            LabelMap { height: h, width: w, data: label }
        })
        .collect())
}
