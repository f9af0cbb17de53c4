//! Pipeline, backbone and adapter configuration.
//!
//! Configs are plain JSON. Loading goes through [`PipelineConfig::from_json_str`]
//! which rejects unknown keys, then applies dotted-key overrides
//! (`unet.n_stages=4`, `epochs=[30,10,50]`) and finally the `SAMDA_SEED`
//! environment variable.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, IoContext, Result};

pub const SEED_ENV: &str = "SAMDA_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub n_stages: usize,
    pub base_channels: usize,
    pub channel_cap: usize,
    pub conv_per_stage: usize,
    pub input_channels: usize,
    pub n_classes: usize,
    /// Channels contributed by the adapter projector at the bottleneck.
    /// Zero builds a plain UNet without an adapter.
    pub fusion_channels: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            n_stages: 8,
            base_channels: 32,
            channel_cap: 512,
            conv_per_stage: 2,
            input_channels: 1,
            n_classes: 2,
            fusion_channels: 64,
        }
    }
}

impl UNetConfig {
    /// Small 4-stage backbone used for tests and CPU experiments.
    pub fn desk() -> Self {
        Self {
            n_stages: 4,
            base_channels: 8,
            fusion_channels: 32,
            ..Self::default()
        }
    }

    /// Output channels of 1-based stage `i`.
    pub fn stage_channels(&self, i: usize) -> usize {
        let width = self.base_channels.saturating_mul(1usize << (i - 1).min(62));
        width.min(self.channel_cap)
    }

    /// Spatial side length must be a multiple of this.
    pub fn required_divisor(&self) -> usize {
        1 << (self.n_stages - 1)
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.stage_channels(self.n_stages)
    }

    pub fn bottleneck_side(&self, side: usize) -> usize {
        side / self.required_divisor()
    }

    pub fn validate(&self) -> Result<()> {
        if !(3..=8).contains(&self.n_stages) {
            return Err(Error::Config(format!(
                "unet.n_stages must lie in [3, 8], got {}",
                self.n_stages
            )));
        }
        for (key, v) in [
            ("unet.base_channels", self.base_channels),
            ("unet.channel_cap", self.channel_cap),
            ("unet.conv_per_stage", self.conv_per_stage),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{key} must be positive")));
            }
        }
        if self.input_channels != 1 {
            return Err(Error::Config(format!(
                "unet.input_channels must be 1 (grayscale), got {}",
                self.input_channels
            )));
        }
        if self.n_classes != 2 {
            return Err(Error::Config(format!(
                "unet.n_classes must be 2 (binary segmentation), got {}",
                self.n_classes
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    /// `(c1, c2, fusion_channels)` of the three projector convolutions.
    pub projector_channels: [usize; 3],
    pub vit_trainable: bool,
    pub projector_trainable: bool,
    /// Optional checkpoint-format manifest with pretrained ViT tensors.
    pub pretrained: Option<PathBuf>,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            patch_size: 4,
            embed_dim: 32,
            depth: 2,
            n_heads: 2,
            mlp_ratio: 4,
            projector_channels: [32, 32, 32],
            vit_trainable: false,
            projector_trainable: true,
            pretrained: None,
        }
    }
}

impl AdapterConfig {
    pub fn desk() -> Self {
        Self::default()
    }

    /// ViT-B sized encoder with 16-pixel patches.
    pub fn paper_fidelity() -> Self {
        Self {
            patch_size: 16,
            embed_dim: 768,
            depth: 12,
            n_heads: 12,
            projector_channels: [256, 128, 64],
            ..Self::default()
        }
    }

    pub fn fusion_channels(&self) -> usize {
        self.projector_channels[2]
    }

    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("adapter.patch_size", self.patch_size),
            ("adapter.embed_dim", self.embed_dim),
            ("adapter.depth", self.depth),
            ("adapter.n_heads", self.n_heads),
            ("adapter.mlp_ratio", self.mlp_ratio),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{key} must be positive")));
            }
        }
        if self.projector_channels.contains(&0) {
            return Err(Error::Config(
                "adapter.projector_channels entries must be positive".into(),
            ));
        }
        if self.embed_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "adapter.embed_dim {} is not divisible by adapter.n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Locations of one domain's images on disk.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainPaths {
    pub name: Option<String>,
    pub images: Option<PathBuf>,
    pub masks: Option<PathBuf>,
    pub raw: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_masks: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DomainPaths,
    pub target: DomainPaths,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub unet: UNetConfig,
    pub adapter: AdapterConfig,
    /// Epoch budgets of the supervised, adaptation and few-shot stages.
    pub epochs: [usize; 3],
    pub learning_rates: [f64; 3],
    /// Optimizer weight decay, identical in all stages.
    pub weight_decay: f64,
    pub momentum: f64,
    pub poly_exponent: f64,
    /// Global gradient-norm clip; `null` disables clipping.
    pub grad_clip: Option<f64>,
    pub batch_size: usize,
    /// Side of the square training crops and inference tiles.
    pub patch_size: usize,
    pub seed: u64,
    pub shots: usize,
    pub raw_pairs: usize,
    pub w_feat: f64,
    pub w_style: f64,
    /// Compare target features against a frozen copy of the stage-1 adapter.
    pub anchor_source_features: bool,
    /// Random horizontal/vertical flips during the supervised stages.
    pub flips: bool,
    pub skip_stage2: bool,
    pub skip_stage3: bool,
    pub eval_overlap: f64,
    pub data: DataConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            unet: UNetConfig::default(),
            adapter: AdapterConfig::paper_fidelity(),
            epochs: [100, 10, 50],
            learning_rates: [1e-2, 1e-2, 1e-3],
            weight_decay: 3e-5,
            momentum: 0.99,
            poly_exponent: 0.9,
            grad_clip: Some(12.0),
            batch_size: 2,
            patch_size: 256,
            seed: 0,
            shots: 10,
            raw_pairs: 20,
            w_feat: 1.0,
            w_style: 1.0,
            anchor_source_features: true,
            flips: true,
            skip_stage2: false,
            skip_stage3: false,
            eval_overlap: 0.5,
            data: DataConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// 4-stage UNet, tiny ViT, 64-pixel crops, batch 8, 30 supervised
    /// epochs. With batch 8 the 20 raw pairs give only 3 steps per epoch, so
    /// stage 2 runs 50 epochs; stage 3 uses the stage-1 rate because a few
    /// dozen steps at 1e-3 cannot move the decoder off an inverted domain.
    pub fn desk() -> Self {
        Self {
            unet: UNetConfig::desk(),
            adapter: AdapterConfig::desk(),
            epochs: [30, 50, 50],
            learning_rates: [1e-2, 1e-2, 1e-2],
            batch_size: 8,
            patch_size: 64,
            ..Self::default()
        }
    }

    /// Parses a JSON config. Keys missing from the file take default values;
    /// keys the schema does not know are rejected.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)?;
        Self::from_value(value, &[])
    }

    pub fn from_value(mut value: Value, overrides: &[String]) -> Result<Self> {
        let schema = serde_json::to_value(Self::default())?;
        check_known_keys(&value, &schema, "")?;
        for ov in overrides {
            apply_override(&mut value, &schema, ov)?;
        }
        let cfg: Self =
            serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path`, applies `overrides`, then honours `SAMDA_SEED`.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_value(value, overrides)?;
        cfg.apply_seed_env()?;
        Ok(cfg)
    }

    pub fn apply_seed_env(&mut self) -> Result<()> {
        if let Ok(raw) = std::env::var(SEED_ENV) {
            self.seed = raw.trim().parse().map_err(|_| {
                Error::Config(format!("{SEED_ENV}={raw:?} is not an unsigned integer"))
            })?;
        }
        Ok(())
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        self.adapter.validate()?;
        if self.unet.fusion_channels != 0
            && self.unet.fusion_channels != self.adapter.fusion_channels()
        {
            return Err(Error::Config(format!(
                "unet.fusion_channels ({}) must equal adapter.projector_channels[2] ({}) or be 0",
                self.unet.fusion_channels,
                self.adapter.fusion_channels()
            )));
        }
        if self.epochs.contains(&0) {
            return Err(Error::Config("epochs entries must be positive".into()));
        }
        if self.learning_rates.iter().any(|lr| !(lr.is_finite() && *lr > 0.0)) {
            return Err(Error::Config("learning_rates entries must be positive".into()));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be nonnegative".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if !(self.w_feat >= 0.0 && self.w_style >= 0.0) {
            return Err(Error::Config("w_feat and w_style must be nonnegative".into()));
        }
        if !(0.0..1.0).contains(&self.eval_overlap) {
            return Err(Error::Config("eval_overlap must lie in [0, 1)".into()));
        }
        for (key, v) in [
            ("batch_size", self.batch_size),
            ("patch_size", self.patch_size),
            ("shots", self.shots),
            ("raw_pairs", self.raw_pairs),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{key} must be positive")));
            }
        }
        let div = self.unet.required_divisor();
        if self.patch_size % div != 0 {
            return Err(Error::Config(format!(
                "patch_size {} is not divisible by {div} (2^(n_stages-1))",
                self.patch_size
            )));
        }
        if self.unet.fusion_channels > 0 && self.patch_size % self.adapter.patch_size != 0 {
            return Err(Error::Config(format!(
                "patch_size {} is not divisible by adapter.patch_size {}",
                self.patch_size, self.adapter.patch_size
            )));
        }
        Ok(())
    }
}

fn check_known_keys(value: &Value, schema: &Value, prefix: &str) -> Result<()> {
    let (Value::Object(map), Value::Object(known)) = (value, schema) else {
        return Ok(());
    };
    for (key, child) in map {
        let path = join_key(prefix, key);
        match known.get(key) {
            None => return Err(Error::UnknownKey(path)),
            Some(schema_child) => check_known_keys(child, schema_child, &path)?,
        }
    }
    Ok(())
}

fn join_key(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

/// Applies one `dotted.key=value` override. The value is parsed as JSON and
/// falls back to a plain string.
fn apply_override(value: &mut Value, schema: &Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not of the form key=value")))?;
    let key = key.trim();
    let parsed: Value =
        serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().into()));

    let mut schema_node = schema;
    let mut node = value;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let known = schema_node
            .as_object()
            .and_then(|m| m.get(*part))
            .ok_or_else(|| Error::UnknownKey(key.to_string()))?;
        schema_node = known;
        if !node.is_object() {
            *node = Value::Object(Default::default());
        }
        let obj = node.as_object_mut().expect("object ensured above");
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Err(Error::UnknownKey(key.to_string()))
}
