//! Training objectives. Every function works at the dtype of its inputs, so
//! gradient checks can run in `f64`.
//!
//! Batched inputs are handled per sample and averaged over the batch.

use candle_core::{Tensor, D};

use crate::error::{Error, Result};

pub const DICE_EPS: f64 = 1e-5;

fn check_seg_shapes(logits: &Tensor, mask: &Tensor) -> Result<()> {
    let (b, c, h, w) = logits.dims4()?;
    if c != 2 {
        return Err(Error::Shape(format!("expected 2 logit channels, got {c}")));
    }
    if mask.dims() != [b, 1, h, w] {
        return Err(Error::Shape(format!(
            "mask shape {:?} does not match logits {b}x2x{h}x{w}",
            mask.dims()
        )));
    }
    Ok(())
}

/// Log-softmax over the channel axis, stabilized by a detached max.
fn log_softmax_channels(logits: &Tensor) -> Result<Tensor> {
    let m = logits.max_keepdim(1)?.detach();
    let z = logits.broadcast_sub(&m)?;
    let lse = z.exp()?.sum_keepdim(1)?.log()?;
    Ok(z.broadcast_sub(&lse)?)
}

/// Soft Dice on the foreground posterior, `1 − (2Σpg + ε)/(Σp + Σg + ε)`.
pub fn dice_loss(logits: &Tensor, mask: &Tensor) -> Result<Tensor> {
    check_seg_shapes(logits, mask)?;
    let g = mask.to_dtype(logits.dtype())?;
    let p = log_softmax_channels(logits)?.narrow(1, 1, 1)?.exp()?;
    let inter = (&p * &g)?.flatten_from(1)?.sum(D::Minus1)?;
    let denom = (p.flatten_from(1)?.sum(D::Minus1)? + g.flatten_from(1)?.sum(D::Minus1)?)?;
    let ratio = ((inter * 2.0)? + DICE_EPS)?.div(&(denom + DICE_EPS)?)?;
    Ok(ratio.affine(-1.0, 1.0)?.mean_all()?)
}

/// Mean over pixels of `−log softmax(logits)[true class]`.
pub fn cross_entropy_loss(logits: &Tensor, mask: &Tensor) -> Result<Tensor> {
    check_seg_shapes(logits, mask)?;
    let g = mask.to_dtype(logits.dtype())?;
    let logp = log_softmax_channels(logits)?;
    let lp0 = logp.narrow(1, 0, 1)?;
    let lp1 = logp.narrow(1, 1, 1)?;
    let picked = ((&g * lp1)? + (g.affine(-1.0, 1.0)? * lp0)?)?;
    Ok(picked.mean_all()?.neg()?)
}

#[derive(Debug, Clone)]
pub struct DiceCe {
    pub total: Tensor,
    pub dice: Tensor,
    pub ce: Tensor,
}

/// Unweighted sum of [`dice_loss`] and [`cross_entropy_loss`].
pub fn dice_ce_loss(logits: &Tensor, mask: &Tensor) -> Result<DiceCe> {
    let dice = dice_loss(logits, mask)?;
    let ce = cross_entropy_loss(logits, mask)?;
    Ok(DiceCe {
        total: (&dice + &ce)?,
        dice,
        ce,
    })
}

fn check_same_shape(hs: &Tensor, ht: &Tensor) -> Result<()> {
    hs.dims4()?;
    if hs.dims() != ht.dims() {
        return Err(Error::Shape(format!(
            "feature maps differ in shape: {:?} vs {:?}",
            hs.dims(),
            ht.dims()
        )));
    }
    Ok(())
}

/// `(1/CHW)·Σ(hs − ht)²`, batch-averaged.
pub fn feature_reconstruction_loss(hs: &Tensor, ht: &Tensor) -> Result<Tensor> {
    check_same_shape(hs, ht)?;
    Ok((hs - ht)?.sqr()?.mean_all()?)
}

/// Batched Gram matrices, `B × C × C`.
#[derive(Debug, Clone)]
pub struct GramMatrix(pub Tensor);

impl GramMatrix {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    /// Matrix of sample `b` as nested rows in `f64`.
    pub fn sample(&self, b: usize) -> Result<Vec<Vec<f64>>> {
        Ok(self.0.get(b)?.to_dtype(candle_core::DType::F64)?.to_vec2()?)
    }
}

/// `G_ij = (1/CHW) Σ_hw s_i s_j` per sample. The result is averaged with its
/// transpose so `G_ij == G_ji` holds bitwise.
pub fn gram_matrix(s: &Tensor) -> Result<GramMatrix> {
    let (b, c, h, w) = s.dims4()?;
    let f = s.reshape((b, c, h * w))?;
    let g = f.matmul(&f.t()?.contiguous()?)?;
    let g = (g / (c * h * w) as f64)?;
    let sym = ((&g + g.t()?)? * 0.5)?.contiguous()?;
    Ok(GramMatrix(sym))
}

fn gram_distance(hs: &Tensor, ht: &Tensor) -> Result<Tensor> {
    let gs = gram_matrix(hs)?;
    let gt = gram_matrix(ht)?;
    Ok((gs.0 - gt.0)?.sqr()?.flatten_from(1)?.sum(D::Minus1)?.mean_all()?)
}

/// Squared Frobenius distance between Gram matrices. Shapes must match.
pub fn style_reconstruction_loss(hs: &Tensor, ht: &Tensor) -> Result<Tensor> {
    check_same_shape(hs, ht)?;
    gram_distance(hs, ht)
}

/// As [`style_reconstruction_loss`], but only batch and channel counts
/// must agree; spatial sizes may differ.
pub fn style_reconstruction_loss_unaligned(hs: &Tensor, ht: &Tensor) -> Result<Tensor> {
    let (bs, cs, _, _) = hs.dims4()?;
    let (bt, ct, _, _) = ht.dims4()?;
    if (bs, cs) != (bt, ct) {
        return Err(Error::Shape(format!(
            "style loss needs equal batch and channels, got {bs}x{cs} vs {bt}x{ct}"
        )));
    }
    gram_distance(hs, ht)
}

#[derive(Debug, Clone)]
pub struct Perceptual {
    pub total: Tensor,
    pub feat: Tensor,
    pub style: Tensor,
}

/// `w_feat·L_feat + w_style·L_style`.
pub fn perceptual_loss(hs: &Tensor, ht: &Tensor, w_feat: f64, w_style: f64) -> Result<Perceptual> {
    let feat = feature_reconstruction_loss(hs, ht)?;
    let style = style_reconstruction_loss(hs, ht)?;
    let total = ((&feat * w_feat)? + (&style * w_style)?)?;
    Ok(Perceptual { total, feat, style })
}

/// Scalar value of a 0-d loss tensor.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}
