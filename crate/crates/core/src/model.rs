//! The composite segmentation model: UNet encoder and decoder plus the
//! optional adapter whose embedding joins the bottleneck.

use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::adapter::{Adapter, AdapterOutput};
use crate::checkpoint::{self, Archive, NamedTensor};
use crate::config::{AdapterConfig, PipelineConfig, UNetConfig};
use crate::error::{Error, Result};
use crate::nn::{softmax_last_dim, GroupFlags, Param, ParamGroup, ParamRegistry};
use crate::unet::{EncoderFeatures, UNetDecoder, UNetEncoder};

/// Everything needed to rebuild a model's parameter layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub unet: UNetConfig,
    /// `None` builds a plain UNet (`unet.fusion_channels` must then be 0).
    pub adapter: Option<AdapterConfig>,
    /// Side of the square inputs the positional embeddings are sized for.
    pub input_side: usize,
}

impl ModelConfig {
    pub fn from_pipeline(cfg: &PipelineConfig) -> Self {
        Self {
            unet: cfg.unet.clone(),
            adapter: (cfg.unet.fusion_channels > 0).then(|| cfg.adapter.clone()),
            input_side: cfg.patch_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        match &self.adapter {
            Some(a) => {
                a.validate()?;
                if a.fusion_channels() != self.unet.fusion_channels {
                    return Err(Error::Config(format!(
                        "projector emits {} channels but the decoder expects {}",
                        a.fusion_channels(),
                        self.unet.fusion_channels
                    )));
                }
            }
            None if self.unet.fusion_channels != 0 => {
                return Err(Error::Config(
                    "unet.fusion_channels > 0 requires an adapter".into(),
                ))
            }
            None => {}
        }
        if self.input_side % self.unet.required_divisor() != 0 {
            return Err(Error::Shape(format!(
                "input side {} is not divisible by {}",
                self.input_side,
                self.unet.required_divisor()
            )));
        }
        Ok(())
    }
}

pub struct SamdaModel {
    config: ModelConfig,
    encoder: UNetEncoder,
    decoder: UNetDecoder,
    adapter: Option<Adapter>,
    params: Vec<Param>,
    flags: GroupFlags,
    tag: Option<String>,
}

impl std::fmt::Debug for SamdaModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SamdaModel")
            .field("config", &self.config)
            .field("params", &self.params.len())
            .field("tag", &self.tag)
            .finish()
    }
}

impl SamdaModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut reg = ParamRegistry::new(seed, DType::F32);
        let encoder = UNetEncoder::new(&mut reg, &config.unet)?;
        let decoder = UNetDecoder::new(&mut reg, &config.unet)?;
        let b = config.unet.bottleneck_side(config.input_side);
        let adapter = match &config.adapter {
            Some(a) => Some(Adapter::new(&mut reg, a, config.input_side, (b, b))?),
            None => None,
        };
        let (params, flags) = reg.finish();
        if let Some(a) = &config.adapter {
            flags.set(ParamGroup::Vit, a.vit_trainable);
            flags.set(ParamGroup::Projector, a.projector_trainable);
        }
        Ok(Self {
            config,
            encoder,
            decoder,
            adapter,
            params,
            flags,
            tag: None,
        })
    }

    /// Builds the model described by `cfg`, seeded with `cfg.seed`, and
    /// loads pretrained ViT weights when configured.
    pub fn from_pipeline(cfg: &PipelineConfig) -> Result<Self> {
        let model = Self::new(ModelConfig::from_pipeline(cfg), cfg.seed)?;
        if let (Some(path), true) = (&cfg.adapter.pretrained, model.adapter.is_some()) {
            crate::adapter::load_pretrained_vit(&model, path)?;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn adapter(&self) -> Option<&Adapter> {
        self.adapter.as_ref()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn tag(&self) -> Option<&str> {
        self.tag.as_deref()
    }

    pub fn set_tag(&mut self, tag: impl Into<String>) {
        self.tag = Some(tag.into());
    }

    pub fn set_trainable(&self, group: ParamGroup, trainable: bool) {
        self.flags.set(group, trainable);
    }

    /// String form of [`SamdaModel::set_trainable`]; unknown names are errors.
    pub fn set_trainable_by_name(&self, group: &str, trainable: bool) -> Result<()> {
        self.set_trainable(group.parse()?, trainable);
        Ok(())
    }

    pub fn is_trainable(&self, group: ParamGroup) -> bool {
        self.flags.get(group)
    }

    pub fn has_group(&self, group: ParamGroup) -> bool {
        self.params.iter().any(|p| p.group() == group)
    }

    pub fn unet_encode(&self, x: &Tensor) -> Result<EncoderFeatures> {
        self.encoder.forward(x)
    }

    pub fn unet_decode(&self, feats: &EncoderFeatures, h_sam: Option<&Tensor>) -> Result<Tensor> {
        self.decoder.forward(feats, h_sam)
    }

    pub fn adapter_forward(&self, x: &Tensor) -> Result<Option<AdapterOutput>> {
        self.adapter.as_ref().map(|a| a.forward(x)).transpose()
    }

    /// Logits `B × 2 × H × W`.
    pub fn seg_forward(&self, x: &Tensor) -> Result<Tensor> {
        let feats = self.unet_encode(x)?;
        let h_sam = self.adapter_forward(x)?.map(|o| o.h_sam);
        self.unet_decode(&feats, h_sam.as_ref())
    }

    /// Per-pixel foreground posterior `B × 1 × H × W`.
    pub fn foreground_probability(&self, x: &Tensor) -> Result<Tensor> {
        let logits = self.seg_forward(x)?.detach();
        let probs = softmax_last_dim(&logits.permute((0, 2, 3, 1))?)?;
        Ok(probs.narrow(D::Minus1, 1, 1)?.permute((0, 3, 1, 2))?.contiguous()?)
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let tensors = self
            .params
            .iter()
            .map(|p| {
                Ok(NamedTensor {
                    name: p.name().to_string(),
                    shape: p.dims().to_vec(),
                    data: p.var().as_tensor().flatten_all()?.to_dtype(DType::F32)?.to_vec1()?,
                    group: Some(p.group()),
                    trainable: p.is_trainable(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Archive {
            tag: self.tag.clone(),
            config: serde_json::to_value(&self.config)?,
            groups: ParamGroup::ALL
                .into_iter()
                .filter(|g| self.has_group(*g))
                .map(|g| (g, self.is_trainable(g)))
                .collect(),
            tensors,
            extra: serde_json::Value::Null,
        })
    }

    /// Copies every tensor and trainability flag from `archive`, which must
    /// list exactly this model's tensors with matching shapes.
    pub fn load_state(&self, archive: &Archive) -> Result<()> {
        if archive.tensors.len() != self.params.len() {
            return Err(Error::TensorMismatch(format!(
                "archive holds {} tensors, model has {}",
                archive.tensors.len(),
                self.params.len()
            )));
        }
        for p in &self.params {
            let t = archive
                .get(p.name())
                .ok_or_else(|| Error::TensorMismatch(format!("archive is missing tensor `{}`", p.name())))?;
            if t.shape != p.dims() {
                return Err(Error::TensorMismatch(format!(
                    "tensor `{}` has shape {:?}, model expects {:?}",
                    p.name(),
                    t.shape,
                    p.dims()
                )));
            }
        }
        for p in &self.params {
            let t = archive.get(p.name()).expect("checked above");
            let value = Tensor::from_vec(t.data.clone(), t.shape.as_slice(), &Device::Cpu)?;
            p.var().set(&value)?;
        }
        for (g, on) in &archive.groups {
            self.set_trainable(*g, *on);
        }
        Ok(())
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let config: ModelConfig = serde_json::from_value(archive.config.clone())
            .map_err(|e| Error::TensorMismatch(format!("checkpoint config echo is unreadable: {e}")))?;
        let mut model = Self::new(config, 0)?;
        model.load_state(archive)?;
        model.tag = archive.tag.clone();
        Ok(model)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        checkpoint::write_archive(dir, &self.to_archive()?)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Self::from_archive(&checkpoint::read_archive(dir)?)
    }

    /// Independent copy with its own storage.
    pub fn deep_copy(&self) -> Result<Self> {
        Self::from_archive(&self.to_archive()?)
    }

    /// SHA-256 of the serialized state.
    pub fn digest(&self) -> Result<String> {
        self.to_archive()?.digest()
    }
}
