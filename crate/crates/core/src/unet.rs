//! 2D UNet backbone with a fusion slot at the bottleneck.
//!
//! Stage 1 keeps full resolution; every later stage opens with a stride-2
//! convolution, so stage `i` works at `side / 2^(i-1)` with
//! `min(base · 2^(i-1), cap)` channels. Decoder stage `i` upsamples with a
//! transposed convolution and concatenates encoder stage `i`.

use candle_core::Tensor;

use crate::config::UNetConfig;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvBlock, ConvTranspose2d, ParamGroup, ParamRegistry};

/// Outputs of every encoder stage, shallowest first.
#[derive(Debug, Clone)]
pub struct EncoderFeatures {
    pub stages: Vec<Tensor>,
}

impl EncoderFeatures {
    pub fn bottleneck(&self) -> &Tensor {
        self.stages.last().expect("encoder has at least one stage")
    }
}

#[derive(Debug, Clone)]
pub struct UNetEncoder {
    config: UNetConfig,
    stages: Vec<Vec<ConvBlock>>,
}

impl UNetEncoder {
    pub fn new(reg: &mut ParamRegistry, config: &UNetConfig) -> Result<Self> {
        config.validate()?;
        reg.set_group(ParamGroup::UnetEncoder);
        let mut stages = Vec::with_capacity(config.n_stages);
        let mut c_in = config.input_channels;
        for i in 1..=config.n_stages {
            let c_out = config.stage_channels(i);
            let blocks = (0..config.conv_per_stage)
                .map(|j| {
                    let stride = if i > 1 && j == 0 { 2 } else { 1 };
                    let c = if j == 0 { c_in } else { c_out };
                    ConvBlock::new(reg, &format!("unet.encoder.stage{i}.block{j}"), c, c_out, stride)
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(blocks);
            c_in = c_out;
        }
        Ok(Self {
            config: config.clone(),
            stages,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.config.input_channels {
            return Err(Error::Shape(format!(
                "encoder expects {} input channel(s), got {c}",
                self.config.input_channels
            )));
        }
        let div = self.config.required_divisor();
        if h % div != 0 || w % div != 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} is not divisible by {div} (2^(n_stages-1) for {} stages)",
                self.config.n_stages
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor) -> Result<EncoderFeatures> {
        self.check_input(x)?;
        let mut feats = Vec::with_capacity(self.stages.len());
        let mut h = x.clone();
        for blocks in &self.stages {
            for block in blocks {
                h = block.forward(&h)?;
            }
            feats.push(h.clone());
        }
        Ok(EncoderFeatures { stages: feats })
    }
}

#[derive(Debug, Clone)]
struct DecoderStage {
    up: ConvTranspose2d,
    blocks: Vec<ConvBlock>,
}

#[derive(Debug, Clone)]
pub struct UNetDecoder {
    config: UNetConfig,
    /// Deepest decoder stage first.
    stages: Vec<DecoderStage>,
    head: Conv2d,
}

impl UNetDecoder {
    pub fn new(reg: &mut ParamRegistry, config: &UNetConfig) -> Result<Self> {
        config.validate()?;
        reg.set_group(ParamGroup::UnetDecoder);
        let n = config.n_stages;
        let mut stages = Vec::with_capacity(n - 1);
        let mut c_in = config.bottleneck_channels() + config.fusion_channels;
        for i in (1..n).rev() {
            let c_skip = config.stage_channels(i);
            let up = ConvTranspose2d::new(reg, &format!("unet.decoder.stage{i}.up"), c_in, c_skip, 2)?;
            let blocks = (0..config.conv_per_stage)
                .map(|j| {
                    let c = if j == 0 { 2 * c_skip } else { c_skip };
                    ConvBlock::new(reg, &format!("unet.decoder.stage{i}.block{j}"), c, c_skip, 1)
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(DecoderStage { up, blocks });
            c_in = c_skip;
        }
        let head = Conv2d::new(reg, "unet.decoder.head", config.stage_channels(1), config.n_classes, 1, 1, 0)?;
        Ok(Self {
            config: config.clone(),
            stages,
            head,
        })
    }

    /// Channels the first decoder stage consumes: bottleneck plus fusion.
    pub fn bottleneck_input_channels(&self) -> usize {
        self.config.bottleneck_channels() + self.config.fusion_channels
    }

    /// Concatenates `h_sam` onto the bottleneck and decodes to
    /// full-resolution logits. `h_sam` must be `None` exactly when the
    /// config has no fusion channels.
    pub fn forward(&self, feats: &EncoderFeatures, h_sam: Option<&Tensor>) -> Result<Tensor> {
        if feats.stages.len() != self.config.n_stages {
            return Err(Error::Shape(format!(
                "decoder expects {} encoder stages, got {}",
                self.config.n_stages,
                feats.stages.len()
            )));
        }
        let bottleneck = feats.bottleneck();
        let (b, _, bh, bw) = bottleneck.dims4()?;
        let mut h = match (h_sam, self.config.fusion_channels) {
            (None, 0) => bottleneck.clone(),
            (None, f) => {
                return Err(Error::Shape(format!(
                    "decoder expects a {f}-channel adapter embedding at the bottleneck"
                )))
            }
            (Some(s), f) => {
                let (sb, sc, sh, sw) = s.dims4()?;
                if sc != f || (sh, sw) != (bh, bw) || sb != b {
                    return Err(Error::Shape(format!(
                        "adapter embedding {sb}x{sc}x{sh}x{sw} does not fit bottleneck {b}x{f}x{bh}x{bw}"
                    )));
                }
                Tensor::cat(&[bottleneck, s], 1)?
            }
        };
        for (stage, skip) in self.stages.iter().zip(feats.stages.iter().rev().skip(1)) {
            h = stage.up.forward(&h)?;
            h = Tensor::cat(&[&h, skip], 1)?;
            for block in &stage.blocks {
                h = block.forward(&h)?;
            }
        }
        self.head.forward(&h)
    }
}
