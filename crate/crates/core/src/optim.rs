//! SGD with Nesterov momentum, L2 weight decay, global gradient-norm
//! clipping and a polynomial learning-rate schedule.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Device, Tensor};

use crate::checkpoint::{Archive, NamedTensor};
use crate::error::Result;
use crate::nn::Param;

/// `lr(t) = lr0 · (1 − t/T)^exponent` for `t` in `0..T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolySchedule {
    pub initial_lr: f64,
    pub total_steps: usize,
    pub exponent: f64,
}

impl PolySchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return self.initial_lr;
        }
        let frac = 1.0 - step as f64 / self.total_steps as f64;
        self.initial_lr * frac.max(0.0).powf(self.exponent)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
    pub grad_clip: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub updated: usize,
}

/// Momentum buffers are keyed by parameter name so they survive a
/// checkpoint round trip.
#[derive(Debug, Clone)]
pub struct Sgd {
    config: SgdConfig,
    buffers: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Self {
            config,
            buffers: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &SgdConfig {
        &self.config
    }

    /// Applies one update to every trainable parameter that received a
    /// gradient. Frozen parameters are never written, and nothing is written
    /// when the gradient norm is not finite.
    pub fn step(&mut self, params: &[Param], grads: &GradStore, lr: f64) -> Result<StepStats> {
        let live: Vec<(&Param, &Tensor)> = params
            .iter()
            .filter(|p| p.is_trainable())
            .filter_map(|p| grads.get(p.var().as_tensor()).map(|g| (p, g)))
            .collect();

        let mut sq = 0f64;
        for (_, g) in &live {
            sq += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        }
        let grad_norm = sq.sqrt();
        if !grad_norm.is_finite() {
            // leave parameters alone; the caller decides how to fail
            return Ok(StepStats { grad_norm, updated: 0 });
        }
        let scale = match self.config.grad_clip {
            Some(max) if grad_norm > max => max / (grad_norm + 1e-6),
            _ => 1.0,
        };

        let mu = self.config.momentum;
        for (p, g) in &live {
            // gradients can carry their own op graph; cut it so buffers stay flat
            let g = g.detach();
            let w = p.var().as_tensor().detach();
            let mut d = if scale != 1.0 { (&g * scale)? } else { g };
            if self.config.weight_decay != 0.0 {
                d = (d + (&w * self.config.weight_decay)?)?;
            }
            let update = if mu != 0.0 {
                let buf = match self.buffers.get(p.name()) {
                    Some(b) => ((b * mu)? + &d)?,
                    None => d.clone(),
                };
                let u = if self.config.nesterov { (&d + (&buf * mu)?)? } else { buf.clone() };
                self.buffers.insert(p.name().to_string(), buf);
                u
            } else {
                d
            };
            p.var().set(&(&w - (update * lr)?)?)?;
        }
        Ok(StepStats {
            grad_norm,
            updated: live.len(),
        })
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let tensors = self
            .buffers
            .iter()
            .map(|(name, t)| {
                Ok(NamedTensor {
                    name: name.clone(),
                    shape: t.dims().to_vec(),
                    data: t.flatten_all()?.to_dtype(candle_core::DType::F32)?.to_vec1()?,
                    group: None,
                    trainable: true,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Archive {
            tag: Some("optimizer".into()),
            config: serde_json::json!({
                "momentum": self.config.momentum,
                "weight_decay": self.config.weight_decay,
                "nesterov": self.config.nesterov,
                "grad_clip": self.config.grad_clip,
            }),
            groups: BTreeMap::new(),
            tensors,
            extra: serde_json::Value::Null,
        })
    }

    pub fn from_archive(config: SgdConfig, archive: &Archive) -> Result<Self> {
        let mut buffers = BTreeMap::new();
        for t in &archive.tensors {
            buffers.insert(
                t.name.clone(),
                Tensor::from_vec(t.data.clone(), t.shape.as_slice(), &Device::Cpu)?,
            );
        }
        Ok(Self { config, buffers })
    }
}
