//! Attention modules that produce the UAFM fusion weight.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamBuilder, Session};
use crate::scalar::Scalar;

/// Which attention module a UAFM uses to produce its weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    /// Channel mean and max of both inputs, weight shaped `[N,1,H,W]`.
    #[default]
    Spatial,
    /// Spatial attention on the two channel means only.
    SpatialNoMax,
    /// Spatial mean and max of both inputs, weight shaped `[N,C,1,1]`.
    Channel,
    /// Constant weight of one half.
    None,
}

impl AttentionKind {
    /// Channels of the concatenated attention input for `c` feature channels.
    pub fn cat_channels(self, c: usize) -> usize {
        match self {
            AttentionKind::Spatial => 4,
            AttentionKind::SpatialNoMax => 2,
            AttentionKind::Channel => 4 * c,
            AttentionKind::None => 0,
        }
    }
}

fn same_shape(op: &'static str, a: &Var<impl Scalar>, b: &Var<impl Scalar>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dims(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// `sigmoid(conv(concat(mean_c(up), max_c(up), mean_c(low), max_c(low))))`.
///
/// With `use_max = false` only the two channel means are concatenated.
/// The convolution is 3×3 with padding 1 and must have one output channel.
pub fn spatial_attention<T: Scalar>(
    g: &Graph<T>,
    f_up: &Var<T>,
    f_low: &Var<T>,
    weight: &Var<T>,
    bias: Option<&Var<T>>,
    use_max: bool,
) -> Result<Var<T>> {
    same_shape("spatial_attention", f_up, f_low)?;
    let cat = if use_max {
        let (up_mean, up_max) = g.channel_mean_max(f_up)?;
        let (low_mean, low_max) = g.channel_mean_max(f_low)?;
        g.concat(&[&up_mean, &up_max, &low_mean, &low_max], 1)?
    } else {
        let up_mean = g.channel_mean(f_up)?;
        let low_mean = g.channel_mean(f_low)?;
        g.concat(&[&up_mean, &low_mean], 1)?
    };
    if weight.shape().first() != Some(&1) {
        return Err(Error::dims("spatial_attention", weight.shape(), &[1, cat.shape()[1], 3, 3]));
    }
    let pad = weight.shape()[2] / 2;
    g.sigmoid(&g.conv2d(&cat, weight, bias, 1, pad)?)
}

/// `sigmoid(conv1x1(concat(avg_s(up), max_s(up), avg_s(low), max_s(low))))`,
/// mapping `4C` pooled channels to `C` weights.
pub fn channel_attention<T: Scalar>(
    g: &Graph<T>,
    f_up: &Var<T>,
    f_low: &Var<T>,
    weight: &Var<T>,
    bias: Option<&Var<T>>,
) -> Result<Var<T>> {
    same_shape("channel_attention", f_up, f_low)?;
    let (up_avg, up_max) = g.spatial_avg_max(f_up)?;
    let (low_avg, low_max) = g.spatial_avg_max(f_low)?;
    let cat = g.concat(&[&up_avg, &up_max, &low_avg, &low_max], 1)?;
    g.sigmoid(&g.conv2d(&cat, weight, bias, 1, 0)?)
}

/// Attention module with its own convolution weights.
#[derive(Debug, Clone)]
pub struct Attention {
    pub kind: AttentionKind,
    pub conv: Option<Conv2d>,
}

impl Attention {
    pub fn new<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        kind: AttentionKind,
        channels: usize,
    ) -> Result<Self> {
        let conv = match kind {
            AttentionKind::Spatial | AttentionKind::SpatialNoMax => {
                Some(Conv2d::new(b, name, kind.cat_channels(channels), 1, 3, 1, 1, true)?)
            }
            AttentionKind::Channel => Some(Conv2d::new(b, name, kind.cat_channels(channels), channels, 1, 1, 0, true)?),
            AttentionKind::None => None,
        };
        Ok(Attention { kind, conv })
    }

    /// The fusion weight for two equally shaped features.
    pub fn alpha<T: Scalar>(&self, s: &Session<'_, T>, f_up: &Var<T>, f_low: &Var<T>) -> Result<Var<T>> {
        let g = s.graph;
        let conv = match (&self.conv, self.kind) {
            (_, AttentionKind::None) => {
                same_shape("attention", f_up, f_low)?;
                return Ok(g.constant(crate::tensor::Tensor::scalar(T::from_f64_lossy(0.5))));
            }
            (Some(c), _) => c,
            (None, _) => return Err(Error::Config("attention module is missing its convolution".into())),
        };
        let w = s.param(conv.weight);
        let bias = conv.bias.map(|id| s.param(id));
        match self.kind {
            AttentionKind::Spatial => spatial_attention(g, f_up, f_low, &w, bias.as_ref(), true),
            AttentionKind::SpatialNoMax => spatial_attention(g, f_up, f_low, &w, bias.as_ref(), false),
            AttentionKind::Channel => channel_attention(g, f_up, f_low, &w, bias.as_ref()),
            AttentionKind::None => unreachable!(),
        }
    }
}
