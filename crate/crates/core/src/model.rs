//! PP-LiteSeg assembly: encoder → SPPM → two UAFMs → segmentation head.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::blocks::{AttentionKind, Fusion, SegHead, SppmBlock, UafmBlock};
use crate::encoder::{Encoder, EncoderConfig, FeaturePyramid};
use crate::error::{Error, Result};
use crate::labels::{argmax, LabelMap};
use crate::nn::{init_rng, ConvBnRelu, Mode, ParamBuilder, ParamStore, Session};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Encoder selection: a preset name or an explicit stage layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EncoderSpec {
    Preset(String),
    Custom(EncoderConfig),
}

impl EncoderSpec {
    pub fn resolve(&self) -> Result<EncoderConfig> {
        match self {
            EncoderSpec::Preset(name) => EncoderConfig::preset(name),
            EncoderSpec::Custom(cfg) => Ok(cfg.clone()),
        }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderSpec,
    /// Decoder widths listed from the 1/8 stage up to the 1/32 stage.
    pub decoder_channels: [usize; 3],
    pub num_classes: usize,
    pub sppm_inter_channels: usize,
    pub sppm_out_channels: usize,
    #[serde(default)]
    pub attention: AttentionKind,
    #[serde(default)]
    pub fusion: Fusion,
    /// When false the SPPM is replaced by a 1×1 Conv-BN-ReLU to `decoder_channels[2]`.
    #[serde(default = "default_true")]
    pub use_sppm: bool,
}

impl ModelConfig {
    /// PP-LiteSeg-T: decoder (32, 64, 128).
    pub fn pp_liteseg_t(num_classes: usize) -> Self {
        ModelConfig {
            encoder: EncoderSpec::Preset("encoder-T".into()),
            decoder_channels: [32, 64, 128],
            num_classes,
            sppm_inter_channels: 128,
            sppm_out_channels: 128,
            attention: AttentionKind::Spatial,
            fusion: Fusion::Blend,
            use_sppm: true,
        }
    }

    /// PP-LiteSeg-B: decoder (64, 96, 128).
    pub fn pp_liteseg_b(num_classes: usize) -> Self {
        ModelConfig {
            encoder: EncoderSpec::Preset("encoder-B".into()),
            decoder_channels: [64, 96, 128],
            ..Self::pp_liteseg_t(num_classes)
        }
    }

    /// Desk-scale model: tiny encoder, decoder (16, 32, 64).
    pub fn tiny(num_classes: usize) -> Self {
        ModelConfig {
            encoder: EncoderSpec::Preset("encoder-tiny".into()),
            decoder_channels: [16, 32, 64],
            num_classes,
            sppm_inter_channels: 64,
            sppm_out_channels: 64,
            attention: AttentionKind::Spatial,
            fusion: Fusion::Blend,
            use_sppm: true,
        }
    }

    pub fn preset(name: &str, num_classes: usize) -> Result<Self> {
        match name {
            "T" | "pp-liteseg-t" => Ok(Self::pp_liteseg_t(num_classes)),
            "B" | "pp-liteseg-b" => Ok(Self::pp_liteseg_b(num_classes)),
            "tiny" => Ok(Self::tiny(num_classes)),
            other => Err(Error::Config(format!("unknown model preset `{other}` (expected T, B or tiny)"))),
        }
    }

    pub fn validate(&self) -> Result<EncoderConfig> {
        let enc = self.encoder.resolve()?;
        enc.validate()?;
        let d = self.decoder_channels;
        if d[0] == 0 || d[0] >= d[1] || d[1] >= d[2] {
            return Err(Error::Config(format!(
                "decoder channels must be positive and strictly increasing from the 1/8 stage to the 1/32 stage, got {d:?}"
            )));
        }
        if self.num_classes == 0 || self.num_classes > 255 {
            return Err(Error::Config(format!("num_classes must be in 1..=255, got {}", self.num_classes)));
        }
        if self.use_sppm && self.sppm_out_channels != d[2] {
            return Err(Error::Config(format!(
                "sppm stage: output channels {} must equal decoder_channels[2] = {}",
                self.sppm_out_channels, d[2]
            )));
        }
        Ok(enc)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

/// Global-context stage fed by the 1/32 feature.
#[derive(Debug, Clone)]
pub enum ContextStage {
    Sppm(SppmBlock),
    /// Ablation: a 1×1 Conv-BN-ReLU in place of the pyramid pooling.
    Bypass(ConvBnRelu),
}

/// Every intermediate of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    pub pyramid: FeaturePyramid<T>,
    /// Context feature at 1/32.
    pub context: Var<T>,
    /// First UAFM output at 1/16.
    pub fused16: Var<T>,
    /// Second UAFM output at 1/8.
    pub fused8: Var<T>,
    pub logits: Var<T>,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub encoder: Encoder,
    pub context: ContextStage,
    pub uafm16: UafmBlock,
    pub uafm8: UafmBlock,
    pub head: SegHead,
}

impl<T: Scalar> Model<T> {
    /// Builds the network with seeded weight initialization.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        let enc_cfg = config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = init_rng(seed);
        let mut b = ParamBuilder::new(&mut params, &mut rng);
        let d = config.decoder_channels;
        let [_, _, c8, c16, c32] = enc_cfg.stage_channels;

        let encoder = Encoder::new(&mut b, "encoder", &enc_cfg)?;
        let context = if config.use_sppm {
            ContextStage::Sppm(
                SppmBlock::new(&mut b, "sppm", c32, config.sppm_inter_channels, config.sppm_out_channels)
                    .map_err(|e| Error::Config(format!("sppm stage: {e}")))?,
            )
        } else {
            ContextStage::Bypass(ConvBnRelu::new(&mut b, "context", c32, d[2], 1, 1)?)
        };
        let uafm16 = UafmBlock::new(&mut b, "uafm16", d[2], c16, d[1], config.attention, config.fusion)
            .map_err(|e| Error::Config(format!("uafm 1/16 stage: {e}")))?;
        let uafm8 = UafmBlock::new(&mut b, "uafm8", d[1], c8, d[0], config.attention, config.fusion)
            .map_err(|e| Error::Config(format!("uafm 1/8 stage: {e}")))?;
        let head = SegHead::new(&mut b, "head", d[0], d[0], config.num_classes)?;
        Ok(Model { config: config.clone(), params, encoder, context, uafm16, uafm8, head })
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn parameter_count(&self) -> usize {
        self.params.parameter_count()
    }

    pub fn forward_trace(&self, s: &Session<'_, T>, image: &Var<T>) -> Result<ForwardTrace<T>> {
        let (_, _, h, w) = image.value().dims4()?;
        let pyramid = self.encoder.forward(s, image)?;
        let context = match &self.context {
            ContextStage::Sppm(sppm) => sppm.forward(s, &pyramid.f32)?,
            ContextStage::Bypass(conv) => conv.forward(s, &pyramid.f32)?,
        };
        let fused16 = self.uafm16.forward(s, &context, &pyramid.f16)?;
        let fused8 = self.uafm8.forward(s, &fused16, &pyramid.f8)?;
        let logits = self.head.forward(s, &fused8, h, w)?;
        Ok(ForwardTrace { pyramid, context, fused16, fused8, logits })
    }

    /// Logits `[N, num_classes, H, W]` for an image batch `[N,3,H,W]`.
    pub fn forward(&self, s: &Session<'_, T>, image: &Var<T>) -> Result<Var<T>> {
        Ok(self.forward_trace(s, image)?.logits)
    }

    /// Eval-mode logits without gradient tracking.
    pub fn logits(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let g = Graph::no_grad();
        let s = Session::new(&g, &self.params, Mode::Eval);
        let x = g.constant(image.clone());
        Ok(self.forward(&s, &x)?.into_value())
    }

    /// Per-pixel class labels (argmax of the eval-mode logits).
    pub fn predict(&self, image: &Tensor<T>) -> Result<Vec<LabelMap>> {
        argmax(&self.logits(image)?)
    }

    /// Same network with every weight converted to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            encoder: self.encoder.clone(),
            context: self.context.clone(),
            uafm16: self.uafm16.clone(),
            uafm8: self.uafm8.clone(),
            head: self.head.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::pp_liteseg_t(19);
        assert!(c.validate().is_ok());
        c.decoder_channels = [64, 64, 128];
        assert!(c.validate().is_err());
        let mut c = ModelConfig::pp_liteseg_t(19);
        c.sppm_out_channels = 96;
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("sppm"), "{err}");
        let mut c = ModelConfig::tiny(4);
        c.encoder = EncoderSpec::Preset("encoder-X".into());
        assert!(c.validate().is_err());
    }

    #[test]
    fn json_round_trip() {
        let c = ModelConfig::pp_liteseg_b(19);
        let back = ModelConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        let custom = r#"{"encoder":{"stage_channels":[8,8,16,16,32],"blocks_per_stage":[1,1,1,1,1]},
            "decoder_channels":[4,8,16],"num_classes":3,"sppm_inter_channels":8,"sppm_out_channels":16}"#;
        let c = ModelConfig::from_json(custom).unwrap();
        assert!(c.use_sppm);
        assert_eq!(c.attention, AttentionKind::Spatial);
    }

    #[test]
    fn tiny_shapes() {
        let m = Model::<f32>::build(&ModelConfig::tiny(4), 0).unwrap();
        let x = Tensor::zeros(vec![1, 3, 64, 128]);
        let y = m.logits(&x).unwrap();
        assert_eq!(y.shape(), &[1, 4, 64, 128]);
        assert!(m.logits(&Tensor::zeros(vec![1, 3, 60, 128])).is_err());
    }
}
