//! Parameters, trainability groups and the layers both encoders are built from.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{Conv2dOp, InstanceNormOp, LeakyReluOp};

/// Parameter groups whose trainability can be toggled independently.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    UnetEncoder,
    UnetDecoder,
    Vit,
    Projector,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::UnetEncoder,
        ParamGroup::UnetDecoder,
        ParamGroup::Vit,
        ParamGroup::Projector,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::UnetEncoder => "unet_encoder",
            ParamGroup::UnetDecoder => "unet_decoder",
            ParamGroup::Vit => "vit",
            ParamGroup::Projector => "projector",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ParamGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ParamGroup::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| Error::UnknownGroup(s.to_string()))
    }
}

/// Shared on/off switches, one per [`ParamGroup`].
#[derive(Debug, Clone)]
pub struct GroupFlags([Arc<AtomicBool>; 4]);

impl Default for GroupFlags {
    fn default() -> Self {
        Self(std::array::from_fn(|_| Arc::new(AtomicBool::new(true))))
    }
}

impl GroupFlags {
    pub fn get(&self, g: ParamGroup) -> bool {
        self.0[g.index()].load(Ordering::Relaxed)
    }

    pub fn set(&self, g: ParamGroup, on: bool) {
        self.0[g.index()].store(on, Ordering::Relaxed)
    }

    fn handle(&self, g: ParamGroup) -> Arc<AtomicBool> {
        self.0[g.index()].clone()
    }
}

/// A named variable. While its group is frozen, [`Param::tensor`] hands out a
/// detached view so autograd never tracks it.
#[derive(Clone)]
pub struct Param {
    name: String,
    group: ParamGroup,
    var: Var,
    trainable: Arc<AtomicBool>,
}

impl fmt::Debug for Param {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Param")
            .field("name", &self.name)
            .field("group", &self.group)
            .field("shape", &self.var.dims())
            .finish()
    }
}

impl Param {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn group(&self) -> ParamGroup {
        self.group
    }

    pub fn var(&self) -> &Var {
        &self.var
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable.load(Ordering::Relaxed)
    }

    pub fn tensor(&self) -> Tensor {
        if self.is_trainable() {
            self.var.as_tensor().clone()
        } else {
            self.var.as_detached_tensor()
        }
    }

    pub fn dims(&self) -> &[usize] {
        self.var.dims()
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Normal(f64),
    /// He initialisation for a leaky-ReLU with the given slope.
    Kaiming { fan_in: usize, negative_slope: f64 },
    Const(f64),
}

/// Creates parameters with deterministic initial values.
pub struct ParamRegistry {
    params: Vec<Param>,
    rng: ChaCha8Rng,
    flags: GroupFlags,
    group: ParamGroup,
    dtype: DType,
}

impl ParamRegistry {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            params: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            flags: GroupFlags::default(),
            group: ParamGroup::UnetEncoder,
            dtype,
        }
    }

    pub fn set_group(&mut self, group: ParamGroup) {
        self.group = group;
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn param(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> Result<Param> {
        let name = name.into();
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Const(v) => vec![v; n],
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| d.sample(&mut self.rng)).collect()
            }
            Init::Kaiming {
                fan_in,
                negative_slope,
            } => {
                let std = (2.0 / ((1.0 + negative_slope * negative_slope) * fan_in as f64)).sqrt();
                let d = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| d.sample(&mut self.rng)).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        let p = Param {
            name,
            group: self.group,
            var: Var::from_tensor(&t)?,
            trainable: self.flags.handle(self.group),
        };
        self.params.push(p.clone());
        Ok(p)
    }

    pub fn finish(self) -> (Vec<Param>, GroupFlags) {
        (self.params, self.flags)
    }
}

pub const LEAKY_SLOPE: f64 = 0.01;

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(LeakyReluOp { slope })?)
}

/// Numerically stable softmax over the last axis.
pub fn softmax_last_dim(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Param,
    bias: Param,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        reg: &mut ParamRegistry,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let fan_in = c_in * kernel * kernel;
        Ok(Self {
            weight: reg.param(
                format!("{name}.weight"),
                &[c_out, c_in, kernel, kernel],
                Init::Kaiming {
                    fan_in,
                    negative_slope: LEAKY_SLOPE,
                },
            )?,
            bias: reg.param(format!("{name}.bias"), &[c_out], Init::Const(0.0))?,
            stride,
            padding,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let op = Conv2dOp {
            stride: self.stride,
            padding: self.padding,
        };
        Ok(x.contiguous()?.apply_op3(&self.weight.tensor(), &self.bias.tensor(), op)?)
    }
}

/// Kernel-2, stride-2 transposed convolution (doubles the spatial size).
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    weight: Param,
    bias: Param,
    stride: usize,
}

impl ConvTranspose2d {
    pub fn new(reg: &mut ParamRegistry, name: &str, c_in: usize, c_out: usize, stride: usize) -> Result<Self> {
        Ok(Self {
            weight: reg.param(
                format!("{name}.weight"),
                &[c_in, c_out, stride, stride],
                Init::Kaiming {
                    fan_in: c_in,
                    negative_slope: LEAKY_SLOPE,
                },
            )?,
            bias: reg.param(format!("{name}.bias"), &[c_out], Init::Const(0.0))?,
            stride,
        })
    }

    /// Kernel equals stride, so every output pixel has exactly one source
    /// pixel and the layer is a matmul followed by a pixel shuffle.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (o, s) = (self.weight.dims()[1], self.stride);
        let wm = self.weight.tensor().reshape((c, o * s * s))?.t()?;
        let y = wm
            .broadcast_matmul(&x.reshape((b, c, h * w))?)?
            .reshape((b, o, s, s, h, w))?
            .permute((0, 1, 4, 2, 5, 3))?
            .reshape((b, o, h * s, w * s))?;
        Ok(y.broadcast_add(&self.bias.tensor().reshape((1, o, 1, 1))?)?)
    }
}

/// Per-sample, per-channel normalisation over the spatial axes with an
/// affine transform. Behaves identically in training and inference.
#[derive(Debug, Clone)]
pub struct InstanceNorm2d {
    weight: Param,
    bias: Param,
    eps: f64,
}

impl InstanceNorm2d {
    pub fn new(reg: &mut ParamRegistry, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: reg.param(format!("{name}.weight"), &[channels], Init::Const(1.0))?,
            bias: reg.param(format!("{name}.bias"), &[channels], Init::Const(0.0))?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.dims4()?;
        let op = InstanceNormOp { eps: self.eps };
        Ok(x.contiguous()?.apply_op3(&self.weight.tensor(), &self.bias.tensor(), op)?)
    }
}

/// Convolution → instance norm → leaky ReLU.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    conv: Conv2d,
    norm: InstanceNorm2d,
}

impl ConvBlock {
    pub fn new(reg: &mut ParamRegistry, name: &str, c_in: usize, c_out: usize, stride: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(reg, &format!("{name}.conv"), c_in, c_out, 3, stride, 1)?,
            norm: InstanceNorm2d::new(reg, &format!("{name}.norm"), c_out)?,
        })
    }

    pub fn stride(&self) -> usize {
        self.conv.stride()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        leaky_relu(&self.norm.forward(&self.conv.forward(x)?)?, LEAKY_SLOPE)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Param,
    bias: Param,
}

impl Linear {
    pub fn new(reg: &mut ParamRegistry, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            weight: reg.param(format!("{name}.weight"), &[d_out, d_in], Init::Normal(0.02))?,
            bias: reg.param(format!("{name}.bias"), &[d_out], Init::Const(0.0))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.tensor().t()?)?;
        Ok(y.broadcast_add(&self.bias.tensor())?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Param,
    bias: Param,
    eps: f64,
}

impl LayerNorm {
    pub fn new(reg: &mut ParamRegistry, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: reg.param(format!("{name}.weight"), &[dim], Init::Const(1.0))?,
            bias: reg.param(format!("{name}.bias"), &[dim], Init::Const(0.0))?,
            eps: 1e-6,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&var.affine(1.0, self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.weight.tensor())?
            .broadcast_add(&self.bias.tensor())?)
    }
}
