//! The adapter branch: a ViT image encoder followed by a three-convolution
//! projector that resamples the token grid to the UNet bottleneck.
//!
//! In the adaptation objective the feature extractor is the whole branch,
//! ViT and projector together, because the projector output is what the
//! decoder consumes.
//!
//! Tensor names (for pretrained manifests):
//!
//! ```text
//! adapter.vit.patch_embed.{weight,bias}     [D, 1, p, p], [D]
//! adapter.vit.pos_embed                     [1, g*g, D]
//! adapter.vit.blocks.{i}.norm1.{weight,bias}
//! adapter.vit.blocks.{i}.attn.qkv.{weight,bias}   [3D, D], [3D]
//! adapter.vit.blocks.{i}.attn.proj.{weight,bias}  [D, D], [D]
//! adapter.vit.blocks.{i}.norm2.{weight,bias}
//! adapter.vit.blocks.{i}.mlp.fc1.{weight,bias}    [rD, D], [rD]
//! adapter.vit.blocks.{i}.mlp.fc2.{weight,bias}    [D, rD], [D]
//! adapter.vit.norm.{weight,bias}
//! adapter.projector.block{0,1,2}.{conv,norm}.{weight,bias}
//! ```

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::checkpoint::{self, Archive, NamedTensor};
use crate::config::AdapterConfig;
use crate::error::{Error, Result};
use crate::model::SamdaModel;
use crate::nn::{softmax_last_dim, Conv2d, ConvBlock, Init, LayerNorm, Linear, Param, ParamGroup, ParamRegistry};

#[derive(Debug, Clone)]
struct VitBlock {
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    n_heads: usize,
}

impl VitBlock {
    fn new(reg: &mut ParamRegistry, name: &str, cfg: &AdapterConfig) -> Result<Self> {
        let d = cfg.embed_dim;
        Ok(Self {
            norm1: LayerNorm::new(reg, &format!("{name}.norm1"), d)?,
            qkv: Linear::new(reg, &format!("{name}.attn.qkv"), d, 3 * d)?,
            proj: Linear::new(reg, &format!("{name}.attn.proj"), d, d)?,
            norm2: LayerNorm::new(reg, &format!("{name}.norm2"), d)?,
            fc1: Linear::new(reg, &format!("{name}.mlp.fc1"), d, cfg.mlp_ratio * d)?,
            fc2: Linear::new(reg, &format!("{name}.mlp.fc2"), cfg.mlp_ratio * d, d)?,
            n_heads: cfg.n_heads,
        })
    }

    fn attention(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        let hd = d / self.n_heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, n, 3, self.n_heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let scores = q
            .matmul(&k.t()?.contiguous()?)?
            .affine(1.0 / (hd as f64).sqrt(), 0.0)?;
        let out = softmax_last_dim(&scores)?.matmul(&v)?;
        let out = out.transpose(1, 2)?.contiguous()?.reshape((b, n, d))?;
        self.proj.forward(&out)
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attention(&self.norm1.forward(x)?)?)?;
        let h = self.fc1.forward(&self.norm2.forward(&x)?)?.gelu()?;
        Ok((&x + self.fc2.forward(&h)?)?)
    }
}

/// Patch embedding, learned positional embeddings, pre-norm transformer
/// blocks and a final norm. The token sequence is returned as a
/// `D × g × g` grid.
#[derive(Debug, Clone)]
pub struct VitEncoder {
    config: AdapterConfig,
    grid: usize,
    patch_embed: Conv2d,
    pos_embed: Param,
    blocks: Vec<VitBlock>,
    norm: LayerNorm,
}

impl VitEncoder {
    pub fn new(reg: &mut ParamRegistry, config: &AdapterConfig, input_side: usize) -> Result<Self> {
        config.validate()?;
        if input_side % config.patch_size != 0 {
            return Err(Error::Shape(format!(
                "input side {input_side} is not divisible by patch size {}",
                config.patch_size
            )));
        }
        reg.set_group(ParamGroup::Vit);
        let grid = input_side / config.patch_size;
        let d = config.embed_dim;
        let p = config.patch_size;
        Ok(Self {
            config: config.clone(),
            grid,
            patch_embed: Conv2d::new(reg, "adapter.vit.patch_embed", 1, d, p, p, 0)?,
            pos_embed: reg.param("adapter.vit.pos_embed", &[1, grid * grid, d], Init::Normal(0.02))?,
            blocks: (0..config.depth)
                .map(|i| VitBlock::new(reg, &format!("adapter.vit.blocks.{i}"), config))
                .collect::<Result<_>>()?,
            norm: LayerNorm::new(reg, "adapter.vit.norm", d)?,
        })
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, _, h, w) = x.dims4()?;
        let p = self.config.patch_size;
        if h % p != 0 || w % p != 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} is not divisible by patch size {p}"
            )));
        }
        if h / p != self.grid || w / p != self.grid {
            return Err(Error::Shape(format!(
                "input {h}x{w} gives a {}x{} token grid; positional embeddings expect {g}x{g}",
                h / p,
                w / p,
                g = self.grid
            )));
        }
        let d = self.config.embed_dim;
        let n = self.grid * self.grid;
        let tokens = self
            .patch_embed
            .forward(x)?
            .reshape((b, d, n))?
            .transpose(1, 2)?
            .contiguous()?
            .broadcast_add(&self.pos_embed.tensor())?;
        let mut h = tokens;
        for block in &self.blocks {
            h = block.forward(&h)?;
        }
        let h = self.norm.forward(&h)?;
        Ok(h.transpose(1, 2)?.contiguous()?.reshape((b, d, self.grid, self.grid))?)
    }
}

/// Bilinear resampling (half-pixel centres, edge clamped) expressed as two
/// constant matrices so gradients pass through matmul.
#[derive(Debug, Clone)]
struct Resample {
    rows: Tensor,
    cols_t: Tensor,
}

fn bilinear_matrix(src: usize, dst: usize) -> Vec<f64> {
    let mut m = vec![0.0; dst * src];
    let scale = src as f64 / dst as f64;
    for o in 0..dst {
        let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(src - 1);
        let t = pos - i0 as f64;
        m[o * src + i0] += 1.0 - t;
        m[o * src + i1] += t;
    }
    m
}

impl Resample {
    fn new(src: (usize, usize), dst: (usize, usize), dtype: DType) -> Result<Self> {
        let rows = Tensor::from_vec(bilinear_matrix(src.0, dst.0), (dst.0, src.0), &Device::Cpu)?.to_dtype(dtype)?;
        let cols_t = Tensor::from_vec(bilinear_matrix(src.1, dst.1), (dst.1, src.1), &Device::Cpu)?
            .to_dtype(dtype)?
            .t()?
            .contiguous()?;
        Ok(Self { rows, cols_t })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.rows.broadcast_matmul(&x.contiguous()?)?;
        Ok(y.broadcast_matmul(&self.cols_t)?)
    }
}

/// Picks per-layer strides whose product is `ratio` when `ratio` is a power
/// of two, front-loading the larger factors. `None` means resampling.
pub fn projector_strides(grid: (usize, usize), target: (usize, usize)) -> Option<[usize; 3]> {
    if target.0 == 0 || grid.0 % target.0 != 0 || grid.1 % target.1 != 0 {
        return None;
    }
    let ratio = grid.0 / target.0;
    if ratio != grid.1 / target.1 || !ratio.is_power_of_two() {
        return None;
    }
    let m = ratio.trailing_zeros() as usize;
    Some(std::array::from_fn(|i| 1 << (m / 3 + usize::from(i < m % 3))))
}

/// Three conv-norm-activation layers `embed_dim → c1 → c2 → fusion`.
#[derive(Debug, Clone)]
pub struct Projector {
    blocks: Vec<ConvBlock>,
    resample: Option<Resample>,
    target: (usize, usize),
}

impl Projector {
    pub fn new(
        reg: &mut ParamRegistry,
        config: &AdapterConfig,
        grid: (usize, usize),
        target: (usize, usize),
    ) -> Result<Self> {
        if target.0 == 0 || target.1 == 0 {
            return Err(Error::Shape("projector target must be non-empty".into()));
        }
        reg.set_group(ParamGroup::Projector);
        let strides = projector_strides(grid, target);
        let [c1, c2, c3] = config.projector_channels;
        let widths = [(config.embed_dim, c1), (c1, c2), (c2, c3)];
        let blocks = widths
            .iter()
            .enumerate()
            .map(|(i, &(ci, co))| {
                let s = strides.map_or(1, |s| s[i]);
                ConvBlock::new(reg, &format!("adapter.projector.block{i}"), ci, co, s)
            })
            .collect::<Result<Vec<_>>>()?;
        let resample = match strides {
            Some(_) => None,
            None => Some(Resample::new(grid, target, reg.dtype())?),
        };
        Ok(Self {
            blocks,
            resample,
            target,
        })
    }

    pub fn strides(&self) -> [usize; 3] {
        std::array::from_fn(|i| self.blocks[i].stride())
    }

    pub fn resamples(&self) -> bool {
        self.resample.is_some()
    }

    pub fn forward(&self, vit_grid: &Tensor) -> Result<Tensor> {
        let mut h = vit_grid.clone();
        for block in &self.blocks {
            h = block.forward(&h)?;
        }
        if let Some(r) = &self.resample {
            h = r.forward(&h)?;
        }
        let (_, _, hh, hw) = h.dims4()?;
        if (hh, hw) != self.target {
            return Err(Error::Shape(format!(
                "projector produced {hh}x{hw}, expected {:?}",
                self.target
            )));
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
pub struct AdapterOutput {
    pub vit_grid: Tensor,
    pub h_sam: Tensor,
}

#[derive(Debug, Clone)]
pub struct Adapter {
    config: AdapterConfig,
    vit: VitEncoder,
    projector: Projector,
}

impl Adapter {
    pub fn new(reg: &mut ParamRegistry, config: &AdapterConfig, input_side: usize, target: (usize, usize)) -> Result<Self> {
        let vit = VitEncoder::new(reg, config, input_side)?;
        let g = vit.grid();
        let projector = Projector::new(reg, config, (g, g), target)?;
        Ok(Self {
            config: config.clone(),
            vit,
            projector,
        })
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.config
    }

    pub fn vit(&self) -> &VitEncoder {
        &self.vit
    }

    pub fn projector(&self) -> &Projector {
        &self.projector
    }

    pub fn vit_encode(&self, x: &Tensor) -> Result<Tensor> {
        self.vit.forward(x)
    }

    pub fn project_embedding(&self, vit_grid: &Tensor) -> Result<Tensor> {
        self.projector.forward(vit_grid)
    }

    pub fn forward(&self, x: &Tensor) -> Result<AdapterOutput> {
        let vit_grid = self.vit_encode(x)?;
        let h_sam = self.project_embedding(&vit_grid)?;
        Ok(AdapterOutput { vit_grid, h_sam })
    }
}

/// Writes only the ViT tensors of `model` in checkpoint format.
pub fn export_vit(model: &SamdaModel, dir: &Path) -> Result<()> {
    let mut archive = model.to_archive()?;
    archive.tensors.retain(|t| t.group == Some(ParamGroup::Vit));
    checkpoint::write_archive(dir, &archive)
}

/// Replaces the model's ViT tensors with those listed in the manifest at
/// `dir`. Every ViT tensor must be present with a matching shape; other
/// tensors in the manifest are ignored. The projector keeps its current
/// values and the ViT trainability follows `adapter.vit_trainable`.
pub fn load_pretrained_vit(model: &SamdaModel, dir: &Path) -> Result<()> {
    let adapter_cfg = model
        .adapter()
        .map(|a| a.config().clone())
        .ok_or_else(|| Error::TensorMismatch("model has no adapter to load ViT weights into".into()))?;
    let archive = checkpoint::read_archive(dir)?;
    let vit_params: Vec<&Param> = model.params().iter().filter(|p| p.group() == ParamGroup::Vit).collect();
    let mut staged = Vec::with_capacity(vit_params.len());
    for p in &vit_params {
        let t = find_matching(&archive, p)?;
        staged.push((p, t));
    }
    for (p, t) in staged {
        let value = Tensor::from_vec(t.data.clone(), t.shape.as_slice(), &Device::Cpu)?.to_dtype(p.var().dtype())?;
        p.var().set(&value)?;
    }
    model.set_trainable(ParamGroup::Vit, adapter_cfg.vit_trainable);
    Ok(())
}

fn find_matching<'a>(archive: &'a Archive, p: &Param) -> Result<&'a NamedTensor> {
    let t = archive
        .get(p.name())
        .ok_or_else(|| Error::TensorMismatch(format!("pretrained manifest is missing tensor `{}`", p.name())))?;
    if t.shape != p.dims() {
        return Err(Error::TensorMismatch(format!(
            "tensor `{}` has shape {:?} in the manifest, model expects {:?}",
            p.name(),
            t.shape,
            p.dims()
        )));
    }
    Ok(t)
}
