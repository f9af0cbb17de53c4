//! Dice evaluation with sliding-window inference, and the few-shot sweep.

use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::data::{make_few_shot_split, pair_raw_batches, DomainDataset, Plane};
use crate::error::{Error, Result};
use crate::model::SamdaModel;
use crate::trainer::{self, anchor_snapshot, held_out_perceptual};

/// `2|P∩G| / (|P|+|G|)` over binary masks; two empty masks score 1.
pub fn dice_coefficient(pred: &Plane, gt: &Plane) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(Error::Shape(format!(
            "prediction {:?} and ground truth {:?} differ in size",
            pred.dims(),
            gt.dims()
        )));
    }
    let (mut inter, mut np, mut ng) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        let (p, g) = (p > 0.5, g > 0.5);
        inter += (p && g) as usize;
        np += p as usize;
        ng += g as usize;
    }
    if np + ng == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (np + ng) as f64)
}

/// Tile start offsets along one axis of length `len` (already padded to at
/// least `patch`). The last tile is flush with the far edge.
pub fn tile_origins(len: usize, patch: usize, overlap: f64) -> Vec<usize> {
    if len <= patch {
        return vec![0];
    }
    let stride = ((patch as f64 * (1.0 - overlap)).round() as usize).clamp(1, patch);
    let n = (len - patch).div_ceil(stride) + 1;
    (0..n).map(|i| (i * stride).min(len - patch)).collect()
}

/// Anything that maps a `B × 1 × P × P` batch to foreground probabilities
/// of the same shape.
pub trait Segmenter {
    fn foreground_probability(&self, x: &Tensor) -> Result<Tensor>;

    fn checkpoint_tag(&self) -> Option<String> {
        None
    }
}

impl Segmenter for SamdaModel {
    fn foreground_probability(&self, x: &Tensor) -> Result<Tensor> {
        SamdaModel::foreground_probability(self, x)
    }

    fn checkpoint_tag(&self) -> Option<String> {
        self.tag().map(str::to_string)
    }
}

fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

fn reflect_pad(plane: &Plane, h: usize, w: usize) -> Plane {
    let mut out = Plane::filled(h, w, 0.0);
    for y in 0..h {
        let sy = reflect_index(y, plane.height);
        for x in 0..w {
            out.set(y, x, plane.get(sy, reflect_index(x, plane.width)));
        }
    }
    out
}

const TILE_BATCH: usize = 8;

/// Per-pixel foreground probability averaged uniformly over overlapping
/// tiles. Images smaller than `patch` are reflect-padded first.
pub fn predict_probability<S: Segmenter + ?Sized>(
    seg: &S,
    image: &Plane,
    patch: usize,
    overlap: f64,
) -> Result<Plane> {
    let (h0, w0) = image.dims();
    let (h, w) = (h0.max(patch), w0.max(patch));
    let padded = if (h, w) == (h0, w0) { image.clone() } else { reflect_pad(image, h, w) };
    let tiles: Vec<(usize, usize)> = tile_origins(h, patch, overlap)
        .into_iter()
        .flat_map(|y| tile_origins(w, patch, overlap).into_iter().map(move |x| (y, x)))
        .collect();

    let mut sum = vec![0f64; h * w];
    let mut count = vec![0u32; h * w];
    for chunk in tiles.chunks(TILE_BATCH) {
        let mut buf = Vec::with_capacity(chunk.len() * patch * patch);
        for &(y, x) in chunk {
            buf.extend_from_slice(&padded.crop(y, x, patch, patch)?.data);
        }
        let x = Tensor::from_vec(buf, (chunk.len(), 1, patch, patch), &Device::Cpu)?;
        let probs = seg.foreground_probability(&x)?;
        for (k, &(y0, x0)) in chunk.iter().enumerate() {
            let p = Plane::from_tensor(&probs, k)?;
            for dy in 0..patch {
                for dx in 0..patch {
                    let idx = (y0 + dy) * w + x0 + dx;
                    sum[idx] += p.get(dy, dx) as f64;
                    count[idx] += 1;
                }
            }
        }
    }
    let mut out = Plane::filled(h0, w0, 0.0);
    for y in 0..h0 {
        for x in 0..w0 {
            let idx = y * w + x;
            out.set(y, x, (sum[idx] / count[idx] as f64) as f32);
        }
    }
    Ok(out)
}

/// Thresholds [`predict_probability`] at `p > 0.5`.
pub fn predict_mask<S: Segmenter + ?Sized>(seg: &S, image: &Plane, patch: usize, overlap: f64) -> Result<Plane> {
    let prob = predict_probability(seg, image, patch, overlap)?;
    let data = prob.data.iter().map(|&p| if p > 0.5 { 1.0 } else { 0.0 }).collect();
    Plane::new(prob.height, prob.width, data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub checkpoint_tag: Option<String>,
    pub dataset: String,
    pub ids: Vec<String>,
    pub per_image: Vec<f64>,
    pub mean_dice: f64,
    pub config: serde_json::Value,
}

pub fn evaluate<S: Segmenter + ?Sized>(
    seg: &S,
    dataset: &DomainDataset,
    patch: usize,
    overlap: f64,
) -> Result<EvalResult> {
    if dataset.annotated.is_empty() {
        return Err(Error::Data(format!("dataset `{}` has no annotated samples to evaluate", dataset.name)));
    }
    let mut ids = Vec::with_capacity(dataset.annotated.len());
    let mut per_image = Vec::with_capacity(dataset.annotated.len());
    for s in &dataset.annotated {
        let pred = predict_mask(seg, &s.image, patch, overlap)?;
        let gt = s.mask.as_ref().expect("annotated samples carry masks");
        ids.push(s.id.clone());
        per_image.push(dice_coefficient(&pred, gt)?);
    }
    let mean_dice = per_image.iter().sum::<f64>() / per_image.len() as f64;
    Ok(EvalResult {
        checkpoint_tag: seg.checkpoint_tag(),
        dataset: dataset.name.clone(),
        ids,
        per_image,
        mean_dice,
        config: serde_json::json!({ "patch_size": patch, "overlap": overlap }),
    })
}

pub fn evaluate_checkpoint(dir: &Path, dataset: &DomainDataset, cfg: &PipelineConfig) -> Result<EvalResult> {
    let model = SamdaModel::load(dir)?;
    evaluate(&model, dataset, cfg.patch_size, cfg.eval_overlap)
}

/// Datasets used by [`few_shot_experiment`].
#[derive(Debug, Clone, Copy)]
pub struct ExperimentData<'a> {
    pub source: &'a DomainDataset,
    pub source_test: &'a DomainDataset,
    pub target: &'a DomainDataset,
    pub target_test: &'a DomainDataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotCell {
    pub shots: usize,
    pub dice: f64,
    pub selected_ids: Vec<String>,
    /// Digest of the stage-2 model the cell started from.
    pub uda_digest: String,
}

/// Everything measured for one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    /// `M_pretrain` on the source test split.
    pub in_domain_dice: f64,
    /// `M_pretrain` on the target test split.
    pub no_da_dice: f64,
    /// `M_uda` on the target test split.
    pub zero_shot_dice: f64,
    /// Held-out perceptual loss of `M_pretrain` and of `M_uda`.
    pub perceptual_before: f64,
    pub perceptual_after: f64,
    /// Loss means over the first and last tenth of the stage-1 trace.
    pub stage1_loss_ends: Option<(f64, f64)>,
    pub cells: Vec<ShotCell>,
    /// UNet-only model adapted on its own bottleneck, then fine-tuned with
    /// `cfg.shots` samples.
    pub unet_adaptor: Option<ShotCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotCurve {
    pub source: String,
    pub target: String,
    pub shots: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Mean over seeds, one entry per shot count.
    pub mean_dice: Vec<f64>,
    /// `per_seed[i][j]`: shot `shots[i]`, seed `seeds[j]`.
    pub per_seed: Vec<Vec<f64>>,
    pub runs: Vec<SeedRun>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOptions {
    pub shots: Vec<usize>,
    pub seeds: Vec<u64>,
    pub unet_adaptor: bool,
    /// Pairs for the held-out perceptual measurement.
    pub held_out_pairs: usize,
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        Self {
            shots: vec![1, 2, 4, 8, 10, 20],
            seeds: vec![0, 1, 2],
            unet_adaptor: false,
            held_out_pairs: 20,
        }
    }
}

fn raw_view(ds: &DomainDataset) -> Result<DomainDataset> {
    DomainDataset::new(ds.name.clone(), ds.annotated.iter().map(|s| s.without_mask()).collect(), Vec::new())
}

const HELD_OUT_SEED_OFFSET: u64 = 0x5eed_0000;

/// Stages 1 and 2 once per seed; stage 3 once per (seed, shot) starting from
/// that seed's `M_uda`.
pub fn few_shot_experiment(
    cfg: &PipelineConfig,
    data: ExperimentData<'_>,
    opts: &ExperimentOptions,
) -> Result<FewShotCurve> {
    if opts.shots.is_empty() || opts.seeds.is_empty() {
        return Err(Error::Config("few-shot experiment needs at least one shot count and one seed".into()));
    }
    let max_shot = *opts.shots.iter().max().expect("non-empty");
    if max_shot > data.target.annotated.len() {
        return Err(Error::Data(format!(
            "largest shot count {max_shot} exceeds the {} annotated target samples",
            data.target.annotated.len()
        )));
    }
    let src_raw_test = raw_view(data.source_test)?;
    let tgt_raw_test = raw_view(data.target_test)?;
    let (patch, overlap) = (cfg.patch_size, cfg.eval_overlap);

    let mut runs = Vec::with_capacity(opts.seeds.len());
    for &seed in &opts.seeds {
        let cfg = PipelineConfig { seed, ..cfg.clone() };
        let mut model = SamdaModel::from_pipeline(&cfg)?;
        let s1 = trainer::train_stage1(&mut model, data.source, &cfg)?;
        let in_domain = evaluate(&model, data.source_test, patch, overlap)?.mean_dice;
        let no_da = evaluate(&model, data.target_test, patch, overlap)?.mean_dice;
        log::info!("seed {seed}: in-domain {in_domain:.4}, noDA {no_da:.4}");

        let held_out = pair_raw_batches(&src_raw_test, &tgt_raw_test, opts.held_out_pairs, seed ^ HELD_OUT_SEED_OFFSET)?;
        let pretrain = anchor_snapshot(&model)?;
        let before = held_out_perceptual(&pretrain, &pretrain, &held_out, &cfg)?;
        trainer::adapt_stage2(&mut model, data.source, data.target, &cfg)?;
        let source_side = if cfg.anchor_source_features { &pretrain } else { &model };
        let after = held_out_perceptual(source_side, &model, &held_out, &cfg)?;
        let zero_shot = evaluate(&model, data.target_test, patch, overlap)?.mean_dice;
        log::info!("seed {seed}: perceptual {before:.5} -> {after:.5}, 0-shot {zero_shot:.4}");

        let mut cells = Vec::with_capacity(opts.shots.len());
        for &k in &opts.shots {
            let uda_digest = model.digest()?;
            let mut m = model.deep_copy()?;
            let split = make_few_shot_split(data.target, k, seed)?;
            trainer::finetune_stage3(&mut m, data.target, &split, &cfg)?;
            let dice = evaluate(&m, data.target_test, patch, overlap)?.mean_dice;
            log::info!("seed {seed}: {k}-shot {dice:.4}");
            cells.push(ShotCell {
                shots: k,
                dice,
                selected_ids: split.selected_ids,
                uda_digest,
            });
        }

        let unet_adaptor = if opts.unet_adaptor {
            let mut ucfg = cfg.clone();
            ucfg.unet.fusion_channels = 0;
            let mut u = SamdaModel::from_pipeline(&ucfg)?;
            trainer::train_stage1(&mut u, data.source, &ucfg)?;
            trainer::adapt_stage2(&mut u, data.source, data.target, &ucfg)?;
            let uda_digest = u.digest()?;
            let split = make_few_shot_split(data.target, ucfg.shots, seed)?;
            trainer::finetune_stage3(&mut u, data.target, &split, &ucfg)?;
            let dice = evaluate(&u, data.target_test, patch, overlap)?.mean_dice;
            log::info!("seed {seed}: UNet-adaptor {dice:.4}");
            Some(ShotCell {
                shots: ucfg.shots,
                dice,
                selected_ids: split.selected_ids,
                uda_digest,
            })
        } else {
            None
        };

        runs.push(SeedRun {
            seed,
            in_domain_dice: in_domain,
            no_da_dice: no_da,
            zero_shot_dice: zero_shot,
            perceptual_before: before,
            perceptual_after: after,
            stage1_loss_ends: s1.loss_ends((s1.trace.len() / 10).max(1)),
            cells,
            unet_adaptor,
        });
    }

    let per_seed: Vec<Vec<f64>> = (0..opts.shots.len())
        .map(|i| runs.iter().map(|r| r.cells[i].dice).collect())
        .collect();
    let mean_dice = per_seed.iter().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect();
    Ok(FewShotCurve {
        source: data.source.name.clone(),
        target: data.target.name.clone(),
        shots: opts.shots.clone(),
        seeds: opts.seeds.clone(),
        mean_dice,
        per_seed,
        runs,
    })
}
