//! The three training stages and the pipeline that chains them.
//!
//! Stage 1 fits the whole model on annotated source crops with Dice-CE.
//! Stage 2 freezes the UNet and aligns adapter embeddings of raw target
//! images to those of raw source images with the perceptual loss. Stage 3
//! fine-tunes on the few annotated target samples of a split.
//!
//! Each stage owns a `ChaCha8` stream (`seed`, stream = stage number) that
//! drives shuffling, crops and flips. Interrupting a stage with
//! [`StageControl::stop_after_epoch`] writes a resume bundle (model,
//! optimizer buffers, anchor snapshot, stream position and trace) so that a
//! resumed run continues the trace exactly.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::PipelineConfig;
use crate::data::{self, make_few_shot_split, pair_raw_batches, DomainDataset, FewShotSplit, Sample};
use crate::error::{Error, IoContext, Result};
use crate::losses::{dice_ce_loss, perceptual_loss, scalar};
use crate::model::SamdaModel;
use crate::nn::ParamGroup;
use crate::optim::{PolySchedule, Sgd, SgdConfig};

pub const TAG_PRETRAIN: &str = "M_pretrain";
pub const TAG_UDA: &str = "M_uda";
pub const TAG_FINAL: &str = "M_final";

pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const TRACE_DIR: &str = "traces";

const RESUME_STATE: &str = "state.json";

/// One optimizer step. Supervised stages fill the Dice/CE columns, the
/// adaptation stage the feature/style columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_dice: Option<f64>,
    pub loss_ce: Option<f64>,
    pub loss_feat: Option<f64>,
    pub loss_style: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageState {
    pub stage: u8,
    /// Completed epochs.
    pub epoch: usize,
    pub epochs: usize,
    pub step: usize,
    pub total_steps: usize,
    pub trace: Vec<StageRecord>,
    pub checkpoint_tag: String,
    /// Word position of the stage stream, as a decimal string.
    pub rng_word_pos: String,
}

impl StageState {
    pub fn is_complete(&self) -> bool {
        self.epoch >= self.epochs
    }

    /// Mean `loss_total` over the first and last `window` records.
    pub fn loss_ends(&self, window: usize) -> Option<(f64, f64)> {
        let n = self.trace.len();
        if n == 0 {
            return None;
        }
        let w = window.clamp(1, n);
        let mean = |r: &[StageRecord]| r.iter().map(|x| x.loss_total).sum::<f64>() / r.len() as f64;
        Some((mean(&self.trace[..w]), mean(&self.trace[n - w..])))
    }
}

/// Interruption and resumption of a single stage.
#[derive(Debug, Clone, Default)]
pub struct StageControl {
    /// Stop once this many epochs of the stage are complete.
    pub stop_after_epoch: Option<usize>,
    /// Where the resume bundle is written on stop and read on start.
    pub resume_dir: Option<PathBuf>,
}

struct LossValues {
    total: Tensor,
    dice: Option<f64>,
    ce: Option<f64>,
    feat: Option<f64>,
    style: Option<f64>,
}

struct StageSpec<'a> {
    stage: u8,
    epochs: usize,
    lr0: f64,
    n_items: usize,
    tag: &'a str,
}

fn sgd_config(cfg: &PipelineConfig) -> SgdConfig {
    SgdConfig {
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
        nesterov: true,
        grad_clip: cfg.grad_clip,
    }
}

pub fn steps_per_epoch(n_items: usize, batch_size: usize) -> usize {
    n_items.div_ceil(batch_size.max(1))
}

pub fn stage_rng(seed: u64, stage: u8) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage as u64);
    rng
}

#[derive(Serialize, Deserialize)]
struct ResumeFile {
    state: StageState,
}

fn write_resume(dir: &Path, model: &SamdaModel, opt: &Sgd, anchor: Option<&SamdaModel>, state: &StageState) -> Result<()> {
    fs::create_dir_all(dir).at(dir)?;
    model.save(&dir.join("model"))?;
    checkpoint::write_archive(&dir.join("optimizer"), &opt.to_archive()?)?;
    if let Some(a) = anchor {
        a.save(&dir.join("anchor"))?;
    }
    let path = dir.join(RESUME_STATE);
    let tmp = dir.join(format!(".{RESUME_STATE}.tmp"));
    fs::write(&tmp, serde_json::to_vec_pretty(&ResumeFile { state: state.clone() })?).at(&tmp)?;
    fs::rename(&tmp, &path).at(&path)?;
    Ok(())
}

fn read_resume(dir: &Path, stage: u8) -> Result<Option<StageState>> {
    let path = dir.join(RESUME_STATE);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).at(&path)?;
    let file: ResumeFile = serde_json::from_str(&text)?;
    Ok((file.state.stage == stage && !file.state.is_complete()).then_some(file.state))
}

fn run_stage<F>(
    spec: StageSpec<'_>,
    model: &SamdaModel,
    anchor: Option<&SamdaModel>,
    cfg: &PipelineConfig,
    control: &StageControl,
    mut loss_fn: F,
) -> Result<StageState>
where
    F: FnMut(&[usize], &mut ChaCha8Rng) -> Result<LossValues>,
{
    let spe = steps_per_epoch(spec.n_items, cfg.batch_size);
    let total_steps = spe * spec.epochs;
    let schedule = PolySchedule {
        initial_lr: spec.lr0,
        total_steps,
        exponent: cfg.poly_exponent,
    };
    let mut rng = stage_rng(cfg.seed, spec.stage);
    let mut opt = Sgd::new(sgd_config(cfg));
    let mut state = StageState {
        stage: spec.stage,
        epoch: 0,
        epochs: spec.epochs,
        step: 0,
        total_steps,
        trace: Vec::with_capacity(total_steps),
        checkpoint_tag: spec.tag.to_string(),
        rng_word_pos: "0".into(),
    };

    if let Some(dir) = &control.resume_dir {
        if let Some(saved) = read_resume(dir, spec.stage)? {
            model.load_state(&checkpoint::read_archive(&dir.join("model"))?)?;
            opt = Sgd::from_archive(sgd_config(cfg), &checkpoint::read_archive(&dir.join("optimizer"))?)?;
            if let Some(a) = anchor {
                a.load_state(&checkpoint::read_archive(&dir.join("anchor"))?)?;
            }
            let pos: u128 = saved
                .rng_word_pos
                .parse()
                .map_err(|_| Error::Config(format!("bad stream position in {}", dir.display())))?;
            rng.set_word_pos(pos);
            log::info!("stage {} resumed after epoch {}", spec.stage, saved.epoch);
            state = saved;
        }
    }

    let mut order: Vec<usize> = (0..spec.n_items).collect();
    while state.epoch < spec.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let lr = schedule.lr(state.step);
            let loss = loss_fn(chunk, &mut rng)?;
            let value = scalar(&loss.total)?;
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    stage: spec.stage,
                    step: state.step,
                    value,
                });
            }
            let grads = loss.total.backward()?;
            let stats = opt.step(model.params(), &grads, lr)?;
            if !stats.grad_norm.is_finite() {
                return Err(Error::NonFinite {
                    stage: spec.stage,
                    step: state.step,
                    value: stats.grad_norm,
                });
            }
            state.trace.push(StageRecord {
                step: state.step,
                epoch: state.epoch,
                lr,
                loss_total: value,
                loss_dice: loss.dice,
                loss_ce: loss.ce,
                loss_feat: loss.feat,
                loss_style: loss.style,
            });
            state.step += 1;
        }
        state.epoch += 1;
        log::debug!(
            "stage {} epoch {}/{} loss {:.5}",
            spec.stage,
            state.epoch,
            spec.epochs,
            state.trace.last().map_or(f64::NAN, |r| r.loss_total)
        );
        if control.stop_after_epoch == Some(state.epoch) && state.epoch < spec.epochs {
            state.rng_word_pos = rng.get_word_pos().to_string();
            let dir = control
                .resume_dir
                .as_ref()
                .ok_or_else(|| Error::Config("stop_after_epoch requires a resume directory".into()))?;
            write_resume(dir, model, &opt, anchor, &state)?;
            return Ok(state);
        }
    }
    state.rng_word_pos = rng.get_word_pos().to_string();
    Ok(state)
}

fn stack(planes: &[&data::Plane]) -> Result<Tensor> {
    let (h, w) = planes[0].dims();
    let mut buf = Vec::with_capacity(planes.len() * h * w);
    for p in planes {
        if p.dims() != (h, w) {
            return Err(Error::Shape(format!("cannot batch {:?} with {:?}", p.dims(), (h, w))));
        }
        buf.extend_from_slice(&p.data);
    }
    Ok(Tensor::from_vec(buf, (planes.len(), 1, h, w), &Device::Cpu)?)
}

/// Random crops (and flips when enabled) of annotated samples, stacked.
pub fn supervised_batch<R: Rng + ?Sized>(
    samples: &[&Sample],
    patch_size: usize,
    flips: bool,
    rng: &mut R,
) -> Result<(Tensor, Tensor)> {
    let mut crops = Vec::with_capacity(samples.len());
    for s in samples {
        let mut c = data::random_crop(s, patch_size, rng)?;
        if flips {
            let (h, v) = (rng.random_bool(0.5), rng.random_bool(0.5));
            c = c.flipped(h, v);
        }
        crops.push(c);
    }
    let images: Vec<_> = crops.iter().map(|c| &c.image).collect();
    let masks = crops
        .iter()
        .map(|c| {
            c.mask
                .as_ref()
                .ok_or_else(|| Error::Data(format!("sample `{}` has no mask", c.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((stack(&images)?, stack(&masks)?))
}

fn raw_batch<R: Rng + ?Sized>(samples: &[&Sample], patch_size: usize, rng: &mut R) -> Result<Tensor> {
    let crops = samples
        .iter()
        .map(|s| data::random_crop(s, patch_size, rng))
        .collect::<Result<Vec<_>>>()?;
    let images: Vec<_> = crops.iter().map(|c| &c.image).collect();
    stack(&images)
}

fn supervised_flags(model: &SamdaModel, cfg: &PipelineConfig) {
    model.set_trainable(ParamGroup::UnetEncoder, true);
    model.set_trainable(ParamGroup::UnetDecoder, true);
    model.set_trainable(ParamGroup::Projector, cfg.adapter.projector_trainable);
    model.set_trainable(ParamGroup::Vit, cfg.adapter.vit_trainable);
}

fn supervised_stage(
    stage: u8,
    model: &SamdaModel,
    samples: &[&Sample],
    cfg: &PipelineConfig,
    control: &StageControl,
    tag: &str,
) -> Result<StageState> {
    let idx = stage as usize - 1;
    let spec = StageSpec {
        stage,
        epochs: cfg.epochs[idx],
        lr0: cfg.learning_rates[idx],
        n_items: samples.len(),
        tag,
    };
    run_stage(spec, model, None, cfg, control, |chunk, rng| {
        let batch: Vec<&Sample> = chunk.iter().map(|&i| samples[i]).collect();
        let (x, y) = supervised_batch(&batch, cfg.patch_size, cfg.flips, rng)?;
        let logits = model.seg_forward(&x)?;
        let l = dice_ce_loss(&logits, &y)?;
        Ok(LossValues {
            dice: Some(scalar(&l.dice)?),
            ce: Some(scalar(&l.ce)?),
            feat: None,
            style: None,
            total: l.total,
        })
    })
}

pub fn train_stage1(model: &mut SamdaModel, source: &DomainDataset, cfg: &PipelineConfig) -> Result<StageState> {
    train_stage1_with(model, source, cfg, &StageControl::default())
}

pub fn train_stage1_with(
    model: &mut SamdaModel,
    source: &DomainDataset,
    cfg: &PipelineConfig,
    control: &StageControl,
) -> Result<StageState> {
    if source.annotated.is_empty() {
        return Err(Error::Data(format!("source `{}` has no annotated samples", source.name)));
    }
    supervised_flags(model, cfg);
    let samples: Vec<&Sample> = source.annotated.iter().collect();
    let state = supervised_stage(1, model, &samples, cfg, control, TAG_PRETRAIN)?;
    if state.is_complete() {
        model.set_tag(TAG_PRETRAIN);
    }
    Ok(state)
}

/// Embedding aligned during stage 2: the adapter's `h_sam`, or the UNet
/// bottleneck for a model built without an adapter.
pub fn adaptation_features(model: &SamdaModel, x: &Tensor) -> Result<Tensor> {
    match model.adapter_forward(x)? {
        Some(out) => Ok(out.h_sam),
        None => Ok(model.unet_encode(x)?.bottleneck().clone()),
    }
}

fn adaptation_flags(model: &SamdaModel, cfg: &PipelineConfig) {
    model.set_trainable(ParamGroup::UnetDecoder, false);
    if model.adapter().is_some() {
        model.set_trainable(ParamGroup::UnetEncoder, false);
        model.set_trainable(ParamGroup::Projector, cfg.adapter.projector_trainable);
        model.set_trainable(ParamGroup::Vit, cfg.adapter.vit_trainable);
    } else {
        // the encoder is the adaptor when there is no adapter
        model.set_trainable(ParamGroup::UnetEncoder, true);
    }
}

/// Frozen copy of `model` used for the source branch in anchor mode.
pub fn anchor_snapshot(model: &SamdaModel) -> Result<SamdaModel> {
    let a = model.deep_copy()?;
    for g in ParamGroup::ALL {
        a.set_trainable(g, false);
    }
    Ok(a)
}

pub fn adapt_stage2(
    model: &mut SamdaModel,
    source: &DomainDataset,
    target: &DomainDataset,
    cfg: &PipelineConfig,
) -> Result<StageState> {
    adapt_stage2_with(model, source, target, cfg, &StageControl::default())
}

pub fn adapt_stage2_with(
    model: &mut SamdaModel,
    source: &DomainDataset,
    target: &DomainDataset,
    cfg: &PipelineConfig,
    control: &StageControl,
) -> Result<StageState> {
    if model.tag() != Some(TAG_PRETRAIN) {
        log::warn!(
            "stage 2 expects a {TAG_PRETRAIN} model, got tag {:?}; continuing",
            model.tag()
        );
    }
    let pairs = pair_raw_batches(source, target, cfg.raw_pairs, cfg.seed)?;
    adaptation_flags(model, cfg);
    let anchor = if cfg.anchor_source_features {
        Some(anchor_snapshot(model)?)
    } else {
        None
    };
    let spec = StageSpec {
        stage: 2,
        epochs: cfg.epochs[1],
        lr0: cfg.learning_rates[1],
        n_items: pairs.len(),
        tag: TAG_UDA,
    };
    let live: &SamdaModel = model;
    let state = run_stage(spec, live, anchor.as_ref(), cfg, control, |chunk, rng| {
        let src: Vec<&Sample> = chunk.iter().map(|&i| &pairs[i].0).collect();
        let tgt: Vec<&Sample> = chunk.iter().map(|&i| &pairs[i].1).collect();
        let xs = raw_batch(&src, cfg.patch_size, rng)?;
        let xt = raw_batch(&tgt, cfg.patch_size, rng)?;
        let hs = adaptation_features(anchor.as_ref().unwrap_or(live), &xs)?;
        let ht = adaptation_features(live, &xt)?;
        let l = perceptual_loss(&hs, &ht, cfg.w_feat, cfg.w_style)?;
        Ok(LossValues {
            dice: None,
            ce: None,
            feat: Some(scalar(&l.feat)?),
            style: Some(scalar(&l.style)?),
            total: l.total,
        })
    })?;
    if state.is_complete() {
        model.set_tag(TAG_UDA);
    }
    Ok(state)
}

pub fn finetune_stage3(
    model: &mut SamdaModel,
    target: &DomainDataset,
    split: &FewShotSplit,
    cfg: &PipelineConfig,
) -> Result<StageState> {
    finetune_stage3_with(model, target, split, cfg, &StageControl::default())
}

pub fn finetune_stage3_with(
    model: &mut SamdaModel,
    target: &DomainDataset,
    split: &FewShotSplit,
    cfg: &PipelineConfig,
    control: &StageControl,
) -> Result<StageState> {
    let samples = split.samples(target)?;
    if samples.is_empty() {
        return Err(Error::Data("few-shot split selects no samples".into()));
    }
    supervised_flags(model, cfg);
    let state = supervised_stage(3, model, &samples, cfg, control, TAG_FINAL)?;
    if state.is_complete() {
        model.set_tag(TAG_FINAL);
    }
    Ok(state)
}

/// Mean perceptual loss over `pairs`, with source features from
/// `source_model` and target features from `target_model`. Images are cut
/// to `cfg.patch_size` at the top-left corner.
pub fn held_out_perceptual(
    source_model: &SamdaModel,
    target_model: &SamdaModel,
    pairs: &[(Sample, Sample)],
    cfg: &PipelineConfig,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Data("no pairs to evaluate".into()));
    }
    let p = cfg.patch_size;
    let mut sum = 0.0;
    for chunk in pairs.chunks(cfg.batch_size.max(1)) {
        let s: Vec<_> = chunk.iter().map(|(a, _)| a.image.crop(0, 0, p, p)).collect::<Result<_>>()?;
        let t: Vec<_> = chunk.iter().map(|(_, b)| b.image.crop(0, 0, p, p)).collect::<Result<_>>()?;
        let xs = stack(&s.iter().collect::<Vec<_>>())?;
        let xt = stack(&t.iter().collect::<Vec<_>>())?;
        let hs = adaptation_features(source_model, &xs)?.detach();
        let ht = adaptation_features(target_model, &xt)?.detach();
        sum += scalar(&perceptual_loss(&hs, &ht, cfg.w_feat, cfg.w_style)?.total)? * chunk.len() as f64;
    }
    Ok(sum / pairs.len() as f64)
}

pub fn write_trace(path: &Path, trace: &[StageRecord]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).at(parent)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in trace {
        w.serialize(r)?;
    }
    w.flush().at(path)?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<Vec<StageRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Stage records in a header-only CSV still carry the column names.
fn write_trace_with_header(path: &Path, trace: &[StageRecord]) -> Result<()> {
    if trace.is_empty() {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).at(parent)?;
        }
        fs::write(path, "step,epoch,lr,loss_total,loss_dice,loss_ce,loss_feat,loss_style\n").at(path)?;
        return Ok(());
    }
    write_trace(path, trace)
}

#[derive(Debug)]
pub struct StageOutput {
    pub state: StageState,
    pub checkpoint: PathBuf,
    pub trace: PathBuf,
}

#[derive(Debug)]
pub struct PipelineOutput {
    pub model: SamdaModel,
    pub stages: Vec<StageOutput>,
    pub split: Option<FewShotSplit>,
}

impl PipelineOutput {
    pub fn final_checkpoint(&self) -> &Path {
        &self.stages.last().expect("stage 1 always runs").checkpoint
    }

    pub fn final_tag(&self) -> &str {
        &self.stages.last().expect("stage 1 always runs").state.checkpoint_tag
    }
}

/// Runs stage 1, then stages 2 and 3 unless skipped in `cfg`, writing each
/// checkpoint under `out_dir/checkpoints/` and each trace under
/// `out_dir/traces/`.
pub fn run_pipeline(
    cfg: &PipelineConfig,
    source: &DomainDataset,
    target: &DomainDataset,
    out_dir: &Path,
) -> Result<PipelineOutput> {
    let mut model = SamdaModel::from_pipeline(cfg)?;
    let ck = out_dir.join(CHECKPOINT_DIR);
    let tr = out_dir.join(TRACE_DIR);
    let mut stages = Vec::new();
    let mut finish = |state: StageState, model: &SamdaModel, n: u8| -> Result<()> {
        let checkpoint = ck.join(&state.checkpoint_tag);
        let trace = tr.join(format!("stage{n}.csv"));
        model.save(&checkpoint)?;
        write_trace_with_header(&trace, &state.trace)?;
        log::info!("stage {n} done: {} steps, wrote {}", state.step, checkpoint.display());
        stages.push(StageOutput { state, checkpoint, trace });
        Ok(())
    };

    let s1 = train_stage1(&mut model, source, cfg)?;
    finish(s1, &model, 1)?;
    if !cfg.skip_stage2 {
        let s2 = adapt_stage2(&mut model, source, target, cfg)?;
        finish(s2, &model, 2)?;
    }
    let mut split = None;
    if !cfg.skip_stage3 {
        let sp = make_few_shot_split(target, cfg.shots, cfg.seed)?;
        let s3 = finetune_stage3(&mut model, target, &sp, cfg)?;
        finish(s3, &model, 3)?;
        let path = out_dir.join("split.json");
        fs::write(&path, serde_json::to_vec_pretty(&sp)?).at(&path)?;
        split = Some(sp);
    }
    Ok(PipelineOutput { model, stages, split })
}
