//! Five-stage stride-2 convolutional encoder.
//!
//! Each stage is one stride-2 Conv-BN-ReLU followed by residual
//! Conv-BN(-ReLU) blocks, so stage `i` (0-based) runs at stride `2^(i+1)`.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{ConvBnRelu, ParamBuilder, Session};
use crate::scalar::Scalar;

pub const NUM_STAGES: usize = 5;
/// Total downsampling of the deepest stage.
pub const OUTPUT_STRIDE: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub stage_channels: [usize; NUM_STAGES],
    pub blocks_per_stage: [usize; NUM_STAGES],
    #[serde(default = "default_input_channels")]
    pub input_channels: usize,
}

fn default_input_channels() -> usize {
    3
}

impl EncoderConfig {
    /// Narrow stand-in used for desk-scale training.
    pub fn tiny() -> Self {
        EncoderConfig { stage_channels: [16, 32, 64, 128, 256], blocks_per_stage: [1; NUM_STAGES], input_channels: 3 }
    }

    /// Narrow/shallow preset paired with the T decoder.
    pub fn t() -> Self {
        EncoderConfig { stage_channels: [32, 64, 128, 256, 512], blocks_per_stage: [1, 1, 2, 2, 2], input_channels: 3 }
    }

    /// Wider/deeper preset paired with the B decoder.
    pub fn b() -> Self {
        EncoderConfig { stage_channels: [32, 64, 256, 512, 1024], blocks_per_stage: [1, 2, 2, 2, 2], input_channels: 3 }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "encoder-tiny" => Ok(Self::tiny()),
            "encoder-T" => Ok(Self::t()),
            "encoder-B" => Ok(Self::b()),
            other => Err(Error::Config(format!(
                "unknown encoder preset `{other}` (expected encoder-tiny, encoder-T or encoder-B)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 {
            return Err(Error::Config("encoder: input_channels must be positive".into()));
        }
        for (i, (&c, &b)) in self.stage_channels.iter().zip(&self.blocks_per_stage).enumerate() {
            if c == 0 || b == 0 {
                return Err(Error::Config(format!("encoder stage {i}: channels and block count must be positive")));
            }
        }
        if self.stage_channels.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config(format!(
                "encoder: stage channels must be nondecreasing, got {:?}",
                self.stage_channels
            )));
        }
        Ok(())
    }
}

/// Encoder outputs at strides 2, 4, 8, 16 and 32.
#[derive(Debug, Clone)]
pub struct FeaturePyramid<T> {
    pub f2: Var<T>,
    pub f4: Var<T>,
    pub f8: Var<T>,
    pub f16: Var<T>,
    pub f32: Var<T>,
}

impl<T: Scalar> FeaturePyramid<T> {
    pub fn levels(&self) -> [&Var<T>; NUM_STAGES] {
        [&self.f2, &self.f4, &self.f8, &self.f16, &self.f32]
    }
}

/// `relu(x + bn(conv3x3(x)))`.
#[derive(Debug, Clone)]
struct ResidualBlock {
    body: ConvBnRelu,
}

impl ResidualBlock {
    fn forward<T: Scalar>(&self, s: &Session<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let y = self.body.forward(s, x)?;
        s.graph.relu(&s.graph.add(x, &y)?)
    }
}

#[derive(Debug, Clone)]
struct Stage {
    down: ConvBnRelu,
    blocks: Vec<ResidualBlock>,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    stages: Vec<Stage>,
}

impl Encoder {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut b = b.child(name);
        let mut in_c = config.input_channels;
        let mut stages = Vec::with_capacity(NUM_STAGES);
        for (i, (&c, &blocks)) in config.stage_channels.iter().zip(&config.blocks_per_stage).enumerate() {
            let mut sb = b.child(&format!("stage{i}"));
            let down = ConvBnRelu::new(&mut sb, "down", in_c, c, 3, 2)?;
            let blocks = (1..blocks)
                .map(|j| {
                    ConvBnRelu::new(&mut sb, &format!("block{j}"), c, c, 3, 1)
                        .map(|body| ResidualBlock { body: body.without_relu() })
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage { down, blocks });
            in_c = c;
        }
        Ok(Encoder { config: config.clone(), stages })
    }

    pub fn forward<T: Scalar>(&self, s: &Session<'_, T>, image: &Var<T>) -> Result<FeaturePyramid<T>> {
        let (_, c, h, w) = image.value().dims4()?;
        if c != self.config.input_channels {
            return Err(Error::dims("encoder", image.shape(), &[self.config.input_channels]));
        }
        if h == 0 || w == 0 || h % OUTPUT_STRIDE != 0 || w % OUTPUT_STRIDE != 0 {
            return Err(Error::invalid(
                "encoder",
                format!("input {h}x{w} must have height and width divisible by {OUTPUT_STRIDE}; pad or resize the image first"),
            ));
        }
        let mut x = image.clone();
        let mut feats = Vec::with_capacity(NUM_STAGES);
        for stage in &self.stages {
            x = stage.down.forward(s, &x)?;
            for block in &stage.blocks {
                x = block.forward(s, &x)?;
            }
            feats.push(x.clone());
        }
        let mut it = feats.into_iter();
        Ok(FeaturePyramid {
            f2: it.next().unwrap(),
            f4: it.next().unwrap(),
            f8: it.next().unwrap(),
            f16: it.next().unwrap(),
            f32: it.next().unwrap(),
        })
    }
}
