//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or IO
//! error, 3 non-finite loss.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{DomainPaths, PipelineConfig};
use crate::data::{load_image_dir, DomainDataset};
use crate::error::{Error, IoContext, Result};
use crate::eval::{self, ExperimentData, ExperimentOptions};
use crate::model::SamdaModel;
use crate::report::{self, ResultRow};
use crate::synth::{write_samples, PairSizes, SyntheticPair};
use crate::trainer;

pub const EFFECTIVE_CONFIG: &str = "effective_config.json";
pub const REPORT_DIR: &str = "reports";

#[derive(Debug, Parser)]
#[command(name = "samda", version, about = "Few-shot domain adaptation for binary segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    /// 4-stage UNet, tiny ViT, 64-pixel crops.
    Desk,
    /// 8-stage UNet, ViT-B sized adapter, 256-pixel crops.
    Paper,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// JSON config; keys missing from the file take preset values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Defaults used for keys the config file leaves out.
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    /// Dotted-key override, e.g. `--set epochs=[30,10,50]`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic source/target domain pair as PNG directories.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        canvas: usize,
    },
    /// Train stage 1, then stages 2 and 3 unless skipped.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        skip_stage2: bool,
        #[arg(long)]
        skip_stage3: bool,
    },
    /// Dice of a checkpoint on the target test split (or `--images`/`--masks`).
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, requires = "masks")]
        images: Option<PathBuf>,
        #[arg(long, requires = "images")]
        masks: Option<PathBuf>,
        /// Render contour overlays for the first N images.
        #[arg(long, default_value_t = 0)]
        overlays: usize,
    },
    /// Few-shot sweep: stages 1-2 per seed, stage 3 per (seed, shots).
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,10,20")]
        shots: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Skip the UNet-only adaptation baseline.
        #[arg(long)]
        no_unet_adaptor: bool,
    },
    /// Merge results tables and re-emit the report.
    Report {
        #[arg(long, required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::UnknownKey(_) | Error::UnknownGroup(_) => 1,
        Error::NonFinite { .. } => 3,
        _ => 2,
    }
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth { out_dir, seed, canvas } => synth(&out_dir, seed, canvas),
        Command::Run {
            cfg,
            skip_stage2,
            skip_stage3,
        } => {
            let mut c = resolve_config(&cfg)?;
            c.skip_stage2 |= skip_stage2;
            c.skip_stage3 |= skip_stage3;
            run(&c, &cfg.out_dir)
        }
        Command::Eval {
            cfg,
            checkpoint,
            images,
            masks,
            overlays,
        } => {
            let c = resolve_config(&cfg)?;
            let ds = match (images, masks) {
                (Some(i), Some(m)) => load_image_dir(&i, Some(&m), "eval")?,
                _ => load_domain(&c.data.target, "target")?
                    .1
                    .ok_or_else(|| Error::Config("data.target.test_images is not set".into()))?,
            };
            eval_cmd(&c, &checkpoint, &ds, overlays, &cfg.out_dir)
        }
        Command::Sweep {
            cfg,
            shots,
            seeds,
            no_unet_adaptor,
        } => {
            let c = resolve_config(&cfg)?;
            let opts = ExperimentOptions {
                shots,
                seeds,
                unet_adaptor: !no_unet_adaptor,
                ..ExperimentOptions::default()
            };
            sweep(&c, &opts, &cfg.out_dir)
        }
        Command::Report { inputs, out_dir } => {
            let mut rows: Vec<ResultRow> = Vec::new();
            for p in &inputs {
                rows.extend(report::read_results_csv(p)?);
            }
            let files = report::emit_report(&rows, &out_dir.join(REPORT_DIR))?;
            log::info!("wrote {}", files.results.display());
            Ok(())
        }
    }
}

fn absolutize(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

/// Preset defaults, then the file, then `--set` overrides, then
/// `SAMDA_SEED`. Relative data paths resolve against the config file.
fn resolve_config(args: &ConfigArgs) -> Result<PipelineConfig> {
    let preset = match args.preset {
        Preset::Desk => PipelineConfig::desk(),
        Preset::Paper => PipelineConfig::default(),
    };
    let mut value = serde_json::to_value(&preset)?;
    let mut base = std::env::current_dir().map_err(|e| Error::io(".", e))?;
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).at(path)?;
        let file: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        merge(&mut value, file);
        if let Some(parent) = path.parent() {
            base = base.join(parent);
        }
    }
    let mut cfg = PipelineConfig::from_value(value, &args.overrides)?;
    cfg.apply_seed_env()?;
    for d in [&mut cfg.data.source, &mut cfg.data.target] {
        for p in [&mut d.images, &mut d.masks, &mut d.raw, &mut d.test_images, &mut d.test_masks] {
            absolutize(&base, p);
        }
    }
    absolutize(&base, &mut cfg.adapter.pretrained);
    Ok(cfg)
}

/// Recursive object merge; `over` wins. Unknown keys survive so that the
/// schema check downstream can reject them.
fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Training pool (annotated plus raw) and optional test split of a domain.
pub fn load_domain(paths: &DomainPaths, default_name: &str) -> Result<(DomainDataset, Option<DomainDataset>)> {
    let name = paths.name.clone().unwrap_or_else(|| default_name.to_string());
    let mut pool = DomainDataset::new(name.clone(), Vec::new(), Vec::new())?;
    if let Some(images) = &paths.images {
        pool = pool.merged(load_image_dir(images, paths.masks.as_deref(), &name)?)?;
    }
    if let Some(raw) = &paths.raw {
        pool = pool.merged(load_image_dir(raw, None, &name)?)?;
    }
    if pool.is_empty() {
        return Err(Error::Config(format!(
            "data.{default_name}: set `images` (with `masks`) and/or `raw`"
        )));
    }
    let test = match (&paths.test_images, &paths.test_masks) {
        (Some(i), Some(m)) => Some(load_image_dir(i, Some(m), &format!("{name}_test"))?),
        (None, None) => None,
        _ => {
            return Err(Error::Config(format!(
                "data.{default_name}: `test_images` and `test_masks` must be set together"
            )))
        }
    };
    Ok((pool, test))
}

fn write_effective_config(cfg: &PipelineConfig, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).at(out_dir)?;
    let path = out_dir.join(EFFECTIVE_CONFIG);
    fs::write(&path, cfg.to_json_pretty()?).at(&path)
}

fn synth(out_dir: &Path, seed: u64, canvas: usize) -> Result<()> {
    let sizes = PairSizes {
        canvas,
        ..PairSizes::default()
    };
    let pair = SyntheticPair::generate(&sizes, seed)?;
    let domain = |ds: &DomainDataset, test: &DomainDataset, dir: &str| -> Result<DomainPaths> {
        let root = out_dir.join(dir);
        write_samples(&ds.annotated, &root.join("images"), Some(&root.join("masks")))?;
        write_samples(&ds.raw, &root.join("raw"), None)?;
        write_samples(&test.annotated, &root.join("test_images"), Some(&root.join("test_masks")))?;
        Ok(DomainPaths {
            name: Some(ds.name.clone()),
            images: Some(PathBuf::from(dir).join("images")),
            masks: Some(PathBuf::from(dir).join("masks")),
            raw: Some(PathBuf::from(dir).join("raw")),
            test_images: Some(PathBuf::from(dir).join("test_images")),
            test_masks: Some(PathBuf::from(dir).join("test_masks")),
        })
    };
    let mut cfg = PipelineConfig::desk();
    cfg.patch_size = canvas;
    cfg.data.source = domain(&pair.source, &pair.source_test, "source")?;
    cfg.data.target = domain(&pair.target, &pair.target_test, "target")?;
    let path = out_dir.join("config.json");
    fs::write(&path, cfg.to_json_pretty()?).at(&path)?;
    log::info!("wrote synthetic domains and {}", path.display());
    Ok(())
}

fn run(cfg: &PipelineConfig, out_dir: &Path) -> Result<()> {
    let (source, _) = load_domain(&cfg.data.source, "source")?;
    let (target, target_test) = load_domain(&cfg.data.target, "target")?;
    write_effective_config(cfg, out_dir)?;
    let out = trainer::run_pipeline(cfg, &source, &target, out_dir)?;
    if let Some(test) = target_test {
        let r = eval::evaluate(&out.model, &test, cfg.patch_size, cfg.eval_overlap)?;
        let dir = out_dir.join(REPORT_DIR);
        fs::create_dir_all(&dir).at(&dir)?;
        let path = dir.join("eval.json");
        fs::write(&path, serde_json::to_vec_pretty(&r)?).at(&path)?;
        log::info!("{} target Dice {:.4}", out.final_tag(), r.mean_dice);
    }
    Ok(())
}

fn eval_cmd(cfg: &PipelineConfig, checkpoint: &Path, ds: &DomainDataset, overlays: usize, out_dir: &Path) -> Result<()> {
    write_effective_config(cfg, out_dir)?;
    let model = SamdaModel::load(checkpoint)?;
    let r = eval::evaluate(&model, ds, cfg.patch_size, cfg.eval_overlap)?;
    let dir = out_dir.join(REPORT_DIR);
    fs::create_dir_all(&dir).at(&dir)?;
    let path = dir.join("eval.json");
    fs::write(&path, serde_json::to_vec_pretty(&r)?).at(&path)?;
    for s in ds.annotated.iter().take(overlays) {
        let pred = eval::predict_mask(&model, &s.image, cfg.patch_size, cfg.eval_overlap)?;
        let gt = s.mask.as_ref().expect("annotated samples carry masks");
        report::render_overlay(&s.image, gt, &pred, &dir.join("overlays").join(format!("{}.png", s.id)))?;
    }
    println!("{:.6}", r.mean_dice);
    Ok(())
}

fn sweep(cfg: &PipelineConfig, opts: &ExperimentOptions, out_dir: &Path) -> Result<()> {
    let (source, source_test) = load_domain(&cfg.data.source, "source")?;
    let (target, target_test) = load_domain(&cfg.data.target, "target")?;
    let missing = |k: &str| Error::Config(format!("data.{k}.test_images is required for a sweep"));
    let source_test = source_test.ok_or_else(|| missing("source"))?;
    let target_test = target_test.ok_or_else(|| missing("target"))?;
    write_effective_config(cfg, out_dir)?;
    let curve = eval::few_shot_experiment(
        cfg,
        ExperimentData {
            source: &source,
            source_test: &source_test,
            target: &target,
            target_test: &target_test,
        },
        opts,
    )?;
    let dir = out_dir.join(REPORT_DIR);
    fs::create_dir_all(&dir).at(&dir)?;
    let path = dir.join("curve.json");
    fs::write(&path, serde_json::to_vec_pretty(&curve)?).at(&path)?;
    let files = report::emit_report(&report::rows_from_curve(&curve), &dir)?;
    log::info!("wrote {}", files.results.display());
    Ok(())
}
