//! Result tables, summaries, Dice-vs-shots plots and contour overlays.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::data::Plane;
use crate::error::{Error, IoContext, Result};
use crate::eval::FewShotCurve;

pub const RESULTS_FILE: &str = "results.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const PLOT_PNG: &str = "dice_vs_shots.png";
pub const PLOT_SVG: &str = "dice_vs_shots.svg";

/// The four reported configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Stage-1 model applied to the target directly.
    #[serde(rename = "noDA")]
    NoDa,
    /// UNet without adapter, adapted on its own bottleneck.
    #[serde(rename = "withDA-unet-adaptor")]
    UnetAdaptor,
    /// Stages 1 and 2 only.
    #[serde(rename = "0shot")]
    ZeroShot,
    /// All three stages.
    #[serde(rename = "kshot")]
    KShot,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::NoDa, Variant::UnetAdaptor, Variant::ZeroShot, Variant::KShot];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::NoDa => "noDA",
            Variant::UnetAdaptor => "withDA-unet-adaptor",
            Variant::ZeroShot => "0shot",
            Variant::KShot => "kshot",
        }
    }

    fn color(self) -> [u8; 3] {
        match self {
            Variant::NoDa => [120, 120, 120],
            Variant::UnetAdaptor => [230, 140, 20],
            Variant::ZeroShot => [40, 110, 200],
            Variant::KShot => [200, 40, 60],
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Data(format!("unknown variant `{s}`")))
    }
}

/// One row of `results.csv`. `shots` is 0 for variants without stage 3.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub source: String,
    pub target: String,
    pub variant: Variant,
    pub seed: u64,
    pub shots: usize,
    pub mean_dice: f64,
}

/// Flattens a sweep into result rows, seed by seed.
pub fn rows_from_curve(curve: &FewShotCurve) -> Vec<ResultRow> {
    let row = |variant, seed, shots, mean_dice| ResultRow {
        source: curve.source.clone(),
        target: curve.target.clone(),
        variant,
        seed,
        shots,
        mean_dice,
    };
    let mut rows = Vec::new();
    for run in &curve.runs {
        rows.push(row(Variant::NoDa, run.seed, 0, run.no_da_dice));
        if let Some(u) = &run.unet_adaptor {
            rows.push(row(Variant::UnetAdaptor, run.seed, u.shots, u.dice));
        }
        rows.push(row(Variant::ZeroShot, run.seed, 0, run.zero_shot_dice));
        for c in &run.cells {
            rows.push(row(Variant::KShot, run.seed, c.shots, c.dice));
        }
    }
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub source: String,
    pub target: String,
    pub variant: Variant,
    pub shots: usize,
    pub n_seeds: usize,
    pub mean_dice: f64,
    /// `mean_dice − noDA mean` for the same domain pair.
    pub delta_abs_vs_noda: Option<f64>,
    /// `(mean_dice − noDA mean) / noDA mean`.
    pub delta_rel_vs_noda: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rows: usize,
    pub variants: Vec<VariantSummary>,
}

pub fn summarize(rows: &[ResultRow]) -> Summary {
    let mut groups: BTreeMap<(String, String, Variant, usize), Vec<f64>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.source.clone(), r.target.clone(), r.variant, r.shots))
            .or_default()
            .push(r.mean_dice);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let baseline: BTreeMap<(String, String), f64> = groups
        .iter()
        .filter(|((_, _, v, _), _)| *v == Variant::NoDa)
        .map(|((s, t, _, _), d)| ((s.clone(), t.clone()), mean(d)))
        .collect();
    let variants = groups
        .iter()
        .map(|((s, t, v, k), d)| {
            let m = mean(d);
            let base = baseline.get(&(s.clone(), t.clone())).copied();
            VariantSummary {
                source: s.clone(),
                target: t.clone(),
                variant: *v,
                shots: *k,
                n_seeds: d.len(),
                mean_dice: m,
                delta_abs_vs_noda: base.map(|b| m - b),
                delta_rel_vs_noda: base.filter(|b| *b != 0.0).map(|b| (m - b) / b),
            }
        })
        .collect();
    Summary {
        rows: rows.len(),
        variants,
    }
}

pub fn results_csv(rows: &[ResultRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Data(format!("csv buffer: {e}")))
}

pub fn read_results_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// One plotted line: `(shots, mean dice)` points in increasing shot order.
/// Variants without stage 3 become horizontal reference lines.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotSeries {
    pub variant: Variant,
    pub points: Vec<(f64, f64)>,
}

pub fn plot_series(rows: &[ResultRow]) -> Vec<PlotSeries> {
    let summary = summarize(rows);
    let max_shot = rows.iter().map(|r| r.shots).max().unwrap_or(0).max(1) as f64;
    let mut by_variant: BTreeMap<Variant, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for v in &summary.variants {
        by_variant
            .entry(v.variant)
            .or_default()
            .entry(v.shots)
            .or_default()
            .push(v.mean_dice);
    }
    by_variant
        .into_iter()
        .map(|(variant, by_shot)| {
            let mut points: Vec<(f64, f64)> = by_shot
                .into_iter()
                .map(|(k, d)| (k as f64, d.iter().sum::<f64>() / d.len() as f64))
                .collect();
            if points.len() == 1 && matches!(variant, Variant::NoDa | Variant::ZeroShot) {
                let y = points[0].1;
                points = vec![(0.0, y), (max_shot, y)];
            }
            PlotSeries { variant, points }
        })
        .collect()
}

const PLOT_W: u32 = 640;
const PLOT_H: u32 = 420;
const MARGIN_L: f64 = 60.0;
const MARGIN_R: f64 = 170.0;
const MARGIN_T: f64 = 30.0;
const MARGIN_B: f64 = 50.0;

struct Axes {
    x_max: f64,
}

impl Axes {
    fn px(&self, x: f64) -> f64 {
        MARGIN_L + x / self.x_max * (PLOT_W as f64 - MARGIN_L - MARGIN_R)
    }

    fn py(&self, y: f64) -> f64 {
        PLOT_H as f64 - MARGIN_B - y.clamp(0.0, 1.0) * (PLOT_H as f64 - MARGIN_T - MARGIN_B)
    }
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, Rgb(c));
    }
}

fn line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), c: [u8; 3], thick: i64) {
    let n = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for i in 0..=n {
        let t = i as f64 / n as f64;
        let (x, y) = ((x0 + t * (x1 - x0)).round() as i64, (y0 + t * (y1 - y0)).round() as i64);
        for dy in -(thick / 2)..=(thick / 2) {
            for dx in -(thick / 2)..=(thick / 2) {
                put(img, x + dx, y + dy, c);
            }
        }
    }
}

fn render_png(series: &[PlotSeries], axes: &Axes) -> Result<Vec<u8>> {
    let mut img = RgbImage::from_pixel(PLOT_W, PLOT_H, Rgb([255, 255, 255]));
    let black = [0, 0, 0];
    let grey = [225, 225, 225];
    for i in 0..=10 {
        let y = axes.py(i as f64 / 10.0);
        line(&mut img, (axes.px(0.0), y), (axes.px(axes.x_max), y), grey, 1);
        line(&mut img, (axes.px(0.0) - 5.0, y), (axes.px(0.0), y), black, 1);
    }
    line(&mut img, (axes.px(0.0), axes.py(0.0)), (axes.px(axes.x_max), axes.py(0.0)), black, 1);
    line(&mut img, (axes.px(0.0), axes.py(0.0)), (axes.px(0.0), axes.py(1.0)), black, 1);
    for s in series {
        let c = s.variant.color();
        for w in s.points.windows(2) {
            line(&mut img, (axes.px(w[0].0), axes.py(w[0].1)), (axes.px(w[1].0), axes.py(w[1].1)), c, 3);
        }
        for &(x, y) in &s.points {
            let (cx, cy) = (axes.px(x).round() as i64, axes.py(y).round() as i64);
            for dy in -3..=3 {
                for dx in -3..=3 {
                    put(&mut img, cx + dx, cy + dy, c);
                }
            }
        }
    }
    // legend swatches; labels live in the SVG
    for (i, s) in series.iter().enumerate() {
        let y = MARGIN_T + 20.0 + 24.0 * i as f64;
        let x = PLOT_W as f64 - MARGIN_R + 20.0;
        line(&mut img, (x, y), (x + 30.0, y), s.variant.color(), 5);
    }
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::Data(format!("png encoding failed: {e}")))?;
    Ok(out.into_inner())
}

fn render_svg(series: &[PlotSeries], axes: &Axes, shot_ticks: &[usize]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{PLOT_W}" height="{PLOT_H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for i in 0..=10 {
        let v = i as f64 / 10.0;
        let y = axes.py(v);
        let _ = writeln!(
            s,
            r##"<line x1="{:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#e1e1e1"/><text x="{:.1}" y="{:.1}" text-anchor="end">{v:.1}</text>"##,
            axes.px(0.0),
            axes.px(axes.x_max),
            axes.px(0.0) - 8.0,
            y + 4.0
        );
    }
    for &k in shot_ticks {
        let x = axes.px(k as f64);
        let _ = writeln!(
            s,
            r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{k}</text>"#,
            axes.py(0.0) + 18.0
        );
    }
    let _ = writeln!(
        s,
        r#"<line x1="{0:.1}" y1="{1:.1}" x2="{2:.1}" y2="{1:.1}" stroke="black"/><line x1="{0:.1}" y1="{1:.1}" x2="{0:.1}" y2="{3:.1}" stroke="black"/>"#,
        axes.px(0.0),
        axes.py(0.0),
        axes.px(axes.x_max),
        axes.py(1.0)
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{}" text-anchor="middle">annotated target samples</text>"#,
        (axes.px(0.0) + axes.px(axes.x_max)) / 2.0,
        PLOT_H - 10
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" transform="rotate(-90 16 {:.1})" text-anchor="middle">Dice</text>"#,
        axes.py(0.5),
        axes.py(0.5)
    );
    for (i, ser) in series.iter().enumerate() {
        let [r, g, b] = ser.variant.color();
        let pts: Vec<String> = ser
            .points
            .iter()
            .map(|&(x, y)| format!("{:.1},{:.1}", axes.px(x), axes.py(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="rgb({r},{g},{b})" stroke-width="2.5" points="{}" data-variant="{}"/>"#,
            pts.join(" "),
            ser.variant
        );
        for &(x, y) in &ser.points {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.1}" cy="{:.1}" r="3.5" fill="rgb({r},{g},{b})"/>"#,
                axes.px(x),
                axes.py(y)
            );
        }
        let ly = MARGIN_T + 20.0 + 24.0 * i as f64;
        let lx = PLOT_W as f64 - MARGIN_R + 20.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="rgb({r},{g},{b})" stroke-width="4"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            lx + 30.0,
            lx + 38.0,
            ly + 4.0,
            ser.variant
        );
    }
    s.push_str("</svg>\n");
    s
}

#[derive(Debug, Clone)]
pub struct ReportFiles {
    pub results: PathBuf,
    pub summary: PathBuf,
    pub plot_png: PathBuf,
    pub plot_svg: PathBuf,
}

/// Writes `results.csv`, `summary.json` and the Dice-vs-shots plot (PNG and
/// SVG) into `out_dir`. All content is rendered before anything touches the
/// disk, so an error leaves no partial report.
pub fn emit_report(rows: &[ResultRow], out_dir: &Path) -> Result<ReportFiles> {
    if rows.is_empty() {
        return Err(Error::Data("no results to report".into()));
    }
    let csv_bytes = results_csv(rows)?;
    let summary = serde_json::to_vec_pretty(&summarize(rows))?;
    let series = plot_series(rows);
    let mut ticks: Vec<usize> = rows.iter().map(|r| r.shots).collect();
    ticks.sort_unstable();
    ticks.dedup();
    let axes = Axes {
        x_max: ticks.last().copied().unwrap_or(0).max(1) as f64,
    };
    let png = render_png(&series, &axes)?;
    let svg = render_svg(&series, &axes, &ticks);

    fs::create_dir_all(out_dir).at(out_dir)?;
    let files = ReportFiles {
        results: out_dir.join(RESULTS_FILE),
        summary: out_dir.join(SUMMARY_FILE),
        plot_png: out_dir.join(PLOT_PNG),
        plot_svg: out_dir.join(PLOT_SVG),
    };
    let outputs = [
        (&files.results, csv_bytes),
        (&files.summary, summary),
        (&files.plot_png, png),
        (&files.plot_svg, svg.into_bytes()),
    ];
    let mut staged = Vec::with_capacity(outputs.len());
    for (path, bytes) in &outputs {
        let name = path.file_name().expect("report files are named").to_string_lossy();
        let tmp = path.with_file_name(format!(".{name}.tmp"));
        if let Err(e) = fs::write(&tmp, bytes).at(&tmp) {
            for t in &staged {
                let _ = fs::remove_file(t);
            }
            return Err(e);
        }
        staged.push(tmp);
    }
    for ((path, _), tmp) in outputs.iter().zip(&staged) {
        fs::rename(tmp, path).at(path)?;
    }
    Ok(files)
}

/// Foreground pixels with a background 4-neighbour; pixels outside the
/// plane count as background.
pub fn boundary(mask: &Plane) -> Vec<bool> {
    let (h, w) = mask.dims();
    let on = |y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask.get(y as usize, x as usize) > 0.5
    };
    let mut out = vec![false; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            if on(y, x) && !(on(y - 1, x) && on(y + 1, x) && on(y, x - 1) && on(y, x + 1)) {
                out[y as usize * w + x as usize] = true;
            }
        }
    }
    out
}

pub const GT_TONE: [u8; 3] = [0, 220, 0];
pub const PRED_TONE: [u8; 3] = [230, 0, 200];
/// Pixels on both contours.
pub const SHARED_TONE: [u8; 3] = [255, 255, 255];

pub fn overlay_image(image: &Plane, gt: &Plane, pred: &Plane) -> Result<RgbImage> {
    if image.dims() != gt.dims() || image.dims() != pred.dims() {
        return Err(Error::Shape(format!(
            "overlay inputs differ in size: image {:?}, gt {:?}, pred {:?}",
            image.dims(),
            gt.dims(),
            pred.dims()
        )));
    }
    let (h, w) = image.dims();
    let (bg, bp) = (boundary(gt), boundary(pred));
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let c = match (bg[i], bp[i]) {
                (true, true) => SHARED_TONE,
                (true, false) => GT_TONE,
                (false, true) => PRED_TONE,
                (false, false) => {
                    let v = (image.get(y, x).clamp(0.0, 1.0) * 255.0).round() as u8;
                    [v, v, v]
                }
            };
            img.put_pixel(x as u32, y as u32, Rgb(c));
        }
    }
    Ok(img)
}

/// Grayscale image with ground-truth and prediction contours.
pub fn render_overlay(image: &Plane, gt: &Plane, pred: &Plane, out_path: &Path) -> Result<()> {
    let img = overlay_image(image, gt, pred)?;
    if let Some(parent) = out_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).at(parent)?;
    }
    img.save_with_format(out_path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: out_path.to_path_buf(),
            source,
        })
}
