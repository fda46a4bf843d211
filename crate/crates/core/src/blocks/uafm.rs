//! Unified Attention Fusion Module.

use serde::{Deserialize, Serialize};

use super::attention::{Attention, AttentionKind};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{ConvBnRelu, ParamBuilder, Session};
use crate::scalar::Scalar;

/// How the upsampled high-level and the low-level features are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// `up * alpha + low * (1 - alpha)`.
    #[default]
    Blend,
    /// Plain elementwise sum; the attention weight is not used.
    Sum,
}

/// `F_out = F_up * alpha + F_low * (1 - alpha)`.
pub fn uafm_blend<T: Scalar>(g: &Graph<T>, f_up: &Var<T>, f_low: &Var<T>, alpha: &Var<T>) -> Result<Var<T>> {
    g.blend(f_up, f_low, alpha)
}

#[derive(Debug, Clone)]
pub struct UafmBlock {
    pub channels: usize,
    pub fusion: Fusion,
    pub attention: Attention,
    /// 1×1 reduction of the high-level input when its width differs from `channels`.
    pub high_proj: Option<ConvBnRelu>,
    /// 1×1 projection of the encoder skip feature to `channels`.
    pub low_proj: Option<ConvBnRelu>,
}

impl UafmBlock {
    pub fn new<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        high_channels: usize,
        low_channels: usize,
        channels: usize,
        attention: AttentionKind,
        fusion: Fusion,
    ) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Config(format!("uafm `{name}`: channels must be positive")));
        }
        let mut b = b.child(name);
        let high_proj = (high_channels != channels)
            .then(|| ConvBnRelu::new(&mut b, "high_proj", high_channels, channels, 1, 1))
            .transpose()?;
        let low_proj = (low_channels != channels)
            .then(|| ConvBnRelu::new(&mut b, "low_proj", low_channels, channels, 1, 1))
            .transpose()?;
        let attention = Attention::new(&mut b, "attention", attention, channels)?;
        Ok(UafmBlock { channels, fusion, attention, high_proj, low_proj })
    }

    /// Aligns both inputs to `[N, channels, H, W]` and returns `(F_up, F_low)`.
    pub fn align<T: Scalar>(&self, s: &Session<'_, T>, f_high: &Var<T>, f_low: &Var<T>) -> Result<(Var<T>, Var<T>)> {
        let high = match &self.high_proj {
            Some(p) => p.forward(s, f_high)?,
            None => f_high.clone(),
        };
        let low = match &self.low_proj {
            Some(p) => p.forward(s, f_low)?,
            None => f_low.clone(),
        };
        let (_, ch, _, _) = high.value().dims4()?;
        let (_, cl, h, w) = low.value().dims4()?;
        if ch != self.channels || cl != self.channels {
            return Err(Error::dims("uafm", high.shape(), low.shape()));
        }
        let up = s.graph.bilinear_upsample(&high, h, w)?;
        Ok((up, low))
    }

    pub fn forward<T: Scalar>(&self, s: &Session<'_, T>, f_high: &Var<T>, f_low: &Var<T>) -> Result<Var<T>> {
        let (up, low) = self.align(s, f_high, f_low)?;
        match self.fusion {
            Fusion::Sum => s.graph.add(&up, &low),
            Fusion::Blend => {
                let alpha = self.attention.alpha(s, &up, &low)?;
                uafm_blend(s.graph, &up, &low, &alpha)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_rng, Mode, ParamStore};
    use crate::tensor::Tensor;

    #[test]
    fn alpha_endpoints_are_exact() {
        let g = Graph::<f32>::no_grad();
        let mut rng = init_rng(9);
        let up = g.constant(Tensor::rand_uniform(vec![2, 3, 4, 4], -2.0, 2.0, &mut rng));
        let low = g.constant(Tensor::rand_uniform(vec![2, 3, 4, 4], -2.0, 2.0, &mut rng));
        let one = g.constant(Tensor::full(vec![2, 1, 4, 4], 1.0));
        let zero = g.constant(Tensor::full(vec![2, 3, 1, 1], 0.0));
        assert!(uafm_blend(&g, &up, &low, &one).unwrap().value().bit_eq(up.value()));
        assert!(uafm_blend(&g, &up, &low, &zero).unwrap().value().bit_eq(low.value()));
    }

    #[test]
    fn identical_inputs_pass_through() {
        for kind in [AttentionKind::Spatial, AttentionKind::SpatialNoMax, AttentionKind::Channel, AttentionKind::None] {
            let mut store = ParamStore::<f32>::new();
            let mut rng = init_rng(4);
            let block = {
                let mut b = ParamBuilder::new(&mut store, &mut rng);
                UafmBlock::new(&mut b, "u", 5, 5, 5, kind, Fusion::Blend).unwrap()
            };
            let g = Graph::no_grad();
            let s = Session::new(&g, &store, Mode::Eval);
            let f = g.constant(Tensor::rand_uniform(vec![1, 5, 6, 6], -3.0, 3.0, &mut rng));
            let out = block.forward(&s, &f, &f).unwrap();
            assert!(out.value().bit_eq(f.value()), "{kind:?}");
        }
    }

    #[test]
    fn projections_created_only_when_needed() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = init_rng(4);
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        let u = UafmBlock::new(&mut b, "u", 128, 64, 64, AttentionKind::Spatial, Fusion::Blend).unwrap();
        assert!(u.high_proj.is_some() && u.low_proj.is_none());
        let u = UafmBlock::new(&mut b, "v", 64, 256, 64, AttentionKind::Spatial, Fusion::Blend).unwrap();
        assert!(u.high_proj.is_none() && u.low_proj.is_some());
    }
}
