//! Segmentation head: Conv-BN-ReLU, 1×1 classifier, upsample to image size.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvBnRelu, ParamBuilder, Session};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct SegHead {
    pub mid: ConvBnRelu,
    pub classifier: Conv2d,
    pub num_classes: usize,
}

impl SegHead {
    pub fn new<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        in_channels: usize,
        mid_channels: usize,
        num_classes: usize,
    ) -> Result<Self> {
        if num_classes == 0 || num_classes > 255 {
            return Err(Error::Config(format!("num_classes must be in 1..=255, got {num_classes}")));
        }
        let mut b = b.child(name);
        let mid = ConvBnRelu::new(&mut b, "mid", in_channels, mid_channels, 3, 1)?;
        let classifier = Conv2d::new(&mut b, "classifier", mid_channels, num_classes, 1, 1, 0, true)?;
        Ok(SegHead { mid, classifier, num_classes })
    }

    /// Class logits at 1/8 scale, before upsampling.
    pub fn logits<T: Scalar>(&self, s: &Session<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let y = self.mid.forward(s, x)?;
        self.classifier.forward(s, &y)
    }

    pub fn forward<T: Scalar>(&self, s: &Session<'_, T>, x: &Var<T>, out_h: usize, out_w: usize) -> Result<Var<T>> {
        let y = self.logits(s, x)?;
        s.graph.bilinear_upsample(&y, out_h, out_w)
    }
}
