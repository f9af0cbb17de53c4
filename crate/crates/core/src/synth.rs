//! Synthetic two-domain benchmark: ellipse "organelles" on a textured
//! background, with a parametric appearance shift for the target domain.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{DomainDataset, Plane, Sample};
use crate::error::{Error, IoContext, Result};

pub const FOREGROUND_BAND: (f64, f64) = (0.55, 0.85);
pub const BACKGROUND_BAND: (f64, f64) = (0.1, 0.3);
const TEXTURE_AMPLITUDE: f64 = 0.03;

/// Appearance change applied as gamma, blur, noise, then inversion.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StyleShift {
    pub invert_intensity: bool,
    pub blur_sigma: f64,
    pub noise_std: f64,
    pub gamma: f64,
}

impl StyleShift {
    pub const IDENTITY: StyleShift = StyleShift {
        invert_intensity: false,
        blur_sigma: 0.0,
        noise_std: 0.0,
        gamma: 1.0,
    };

    /// The target-domain shift of the canonical synthetic pair.
    pub const CANONICAL_TARGET: StyleShift = StyleShift {
        invert_intensity: true,
        blur_sigma: 1.0,
        noise_std: 0.05,
        gamma: 1.3,
    };

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }
}

/// One rotated ellipse in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub semi_a: f64,
    pub semi_b: f64,
    pub theta: f64,
    pub intensity: f64,
}

impl Ellipse {
    /// Whether the pixel centre `(x + 0.5, y + 0.5)` lies inside.
    pub fn contains_pixel(&self, y: usize, x: usize) -> bool {
        let dx = x as f64 + 0.5 - self.cx;
        let dy = y as f64 + 0.5 - self.cy;
        let (s, c) = self.theta.sin_cos();
        let u = (dx * c + dy * s) / self.semi_a;
        let v = (-dx * s + dy * c) / self.semi_b;
        u * u + v * v <= 1.0
    }
}

/// Draws the ellipse layout of one sample. [`generate_blob_sample`] consumes
/// the stream in exactly this order before drawing the texture.
pub fn draw_ellipses<R: Rng + ?Sized>(canvas: usize, n_blobs: usize, rng: &mut R) -> Vec<Ellipse> {
    let c = canvas as f64;
    let (amin, amax) = (c / 16.0, c / 6.0);
    (0..n_blobs)
        .map(|_| Ellipse {
            cx: rng.random_range(c / 8.0..c * 7.0 / 8.0),
            cy: rng.random_range(c / 8.0..c * 7.0 / 8.0),
            semi_a: rng.random_range(amin..=amax),
            semi_b: rng.random_range(amin..=amax),
            theta: rng.random_range(0.0..PI),
            intensity: rng.random_range(FOREGROUND_BAND.0..=FOREGROUND_BAND.1),
        })
        .collect()
}

pub fn rasterize_union(canvas: usize, ellipses: &[Ellipse]) -> Plane {
    let mut mask = Plane::filled(canvas, canvas, 0.0);
    for y in 0..canvas {
        for x in 0..canvas {
            if ellipses.iter().any(|e| e.contains_pixel(y, x)) {
                mask.set(y, x, 1.0);
            }
        }
    }
    mask
}

/// A smooth low-amplitude pattern: a few random plane waves.
fn texture<R: Rng + ?Sized>(canvas: usize, rng: &mut R) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            let freq = rng.random_range(2.0..6.0) * 2.0 * PI / canvas as f64;
            let dir = rng.random_range(0.0..PI);
            let phase = rng.random_range(0.0..2.0 * PI);
            (freq * dir.cos(), freq * dir.sin(), phase)
        })
        .collect();
    let mut out = Vec::with_capacity(canvas * canvas);
    for y in 0..canvas {
        for x in 0..canvas {
            let s: f64 = waves
                .iter()
                .map(|(kx, ky, p)| (kx * x as f64 + ky * y as f64 + p).sin())
                .sum();
            out.push(TEXTURE_AMPLITUDE * s / 3.0);
        }
    }
    out
}

pub fn generate_blob_sample<R: Rng + ?Sized>(
    id: &str,
    canvas: usize,
    n_blobs: usize,
    domain_tag: &str,
    rng: &mut R,
) -> Result<Sample> {
    if canvas < 32 {
        return Err(Error::Data(format!("canvas must be at least 32, got {canvas}")));
    }
    if n_blobs == 0 {
        return Err(Error::Data("n_blobs must be at least 1".into()));
    }
    let ellipses = draw_ellipses(canvas, n_blobs, rng);
    let background = rng.random_range(BACKGROUND_BAND.0..=BACKGROUND_BAND.1);
    let tex = texture(canvas, rng);

    let mut image = Plane::filled(canvas, canvas, 0.0);
    let mut mask = Plane::filled(canvas, canvas, 0.0);
    for y in 0..canvas {
        for x in 0..canvas {
            let mut level = background;
            // later blobs paint over earlier ones
            for e in &ellipses {
                if e.contains_pixel(y, x) {
                    level = e.intensity;
                    mask.set(y, x, 1.0);
                }
            }
            let v = (level + tex[y * canvas + x]).clamp(0.0, 1.0);
            image.set(y, x, v as f32);
        }
    }
    Sample::new(id, image, Some(mask), domain_tag)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - j;
    }
    j as usize
}

/// Separable Gaussian blur with reflected borders.
pub fn gaussian_blur(plane: &Plane, sigma: f64) -> Plane {
    if sigma <= 0.0 {
        return plane.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let (h, w) = plane.dims();
    let mut tmp = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * plane.get(y, reflect(x as i64 + i as i64 - r, w)) as f64)
                .sum();
        }
    }
    let mut out = Plane::filled(h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            let v: f64 = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * tmp[reflect(y as i64 + i as i64 - r, h) * w + x])
                .sum();
            out.set(y, x, v as f32);
        }
    }
    out
}

/// Applies `shift` to the image; the mask is left untouched. The noise term
/// draws from `rng`.
pub fn apply_domain_style<R: Rng + ?Sized>(sample: &Sample, shift: &StyleShift, rng: &mut R) -> Result<Sample> {
    if shift.is_identity() {
        return Ok(sample.clone());
    }
    if !(shift.gamma > 0.0) || shift.blur_sigma < 0.0 || shift.noise_std < 0.0 {
        return Err(Error::Data(format!("invalid style shift {shift:?}")));
    }
    let mut image = sample.image.clone();
    if shift.gamma != 1.0 {
        let g = shift.gamma as f32;
        image.data.iter_mut().for_each(|v| *v = v.powf(g));
    }
    if shift.blur_sigma > 0.0 {
        image = gaussian_blur(&image, shift.blur_sigma);
    }
    if shift.noise_std > 0.0 {
        let normal = Normal::new(0.0, shift.noise_std).expect("finite std");
        image
            .data
            .iter_mut()
            .for_each(|v| *v += normal.sample(rng) as f32);
    }
    if shift.invert_intensity {
        image.data.iter_mut().for_each(|v| *v = 1.0 - *v);
    }
    image.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Sample::new(sample.id.clone(), image, sample.mask.clone(), sample.domain_tag.clone())
}

/// Deterministic dataset of `n_annotated` masked and `n_raw` maskless
/// samples, each with 2–6 blobs.
pub fn generate_domain_dataset(
    name: &str,
    n_annotated: usize,
    n_raw: usize,
    canvas: usize,
    shift: &StyleShift,
    seed: u64,
) -> Result<DomainDataset> {
    if n_annotated + n_raw == 0 {
        return Err(Error::Data("dataset needs at least one sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut make = |id: String| -> Result<Sample> {
        let n_blobs = rng.random_range(2..=6);
        let s = generate_blob_sample(&id, canvas, n_blobs, name, &mut rng)?;
        apply_domain_style(&s, shift, &mut rng)
    };
    let annotated = (0..n_annotated)
        .map(|i| make(format!("{name}_ann_{i:04}")))
        .collect::<Result<Vec<_>>>()?;
    let raw = (0..n_raw)
        .map(|i| make(format!("{name}_raw_{i:04}")).map(|s| s.without_mask()))
        .collect::<Result<Vec<_>>>()?;
    DomainDataset::new(name, raw, annotated)
}

/// Sizes of the canonical source/target benchmark.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PairSizes {
    pub canvas: usize,
    pub source_annotated: usize,
    pub source_raw: usize,
    pub source_test: usize,
    pub target_annotated: usize,
    pub target_raw: usize,
    pub target_test: usize,
}

impl Default for PairSizes {
    fn default() -> Self {
        Self {
            canvas: 64,
            source_annotated: 96,
            source_raw: 30,
            source_test: 24,
            target_annotated: 40,
            target_raw: 30,
            target_test: 32,
        }
    }
}

/// Identity-styled source and canonically shifted target, each with a
/// disjoint annotated test set.
#[derive(Debug, Clone)]
pub struct SyntheticPair {
    pub source: DomainDataset,
    pub source_test: DomainDataset,
    pub target: DomainDataset,
    pub target_test: DomainDataset,
}

impl SyntheticPair {
    pub fn generate(sizes: &PairSizes, seed: u64) -> Result<Self> {
        let c = sizes.canvas;
        let target_shift = StyleShift::CANONICAL_TARGET;
        let base = seed.wrapping_mul(4);
        Ok(Self {
            source: generate_domain_dataset("source", sizes.source_annotated, sizes.source_raw, c, &StyleShift::IDENTITY, base)?,
            source_test: generate_domain_dataset("source_test", sizes.source_test, 0, c, &StyleShift::IDENTITY, base + 1)?,
            target: generate_domain_dataset("target", sizes.target_annotated, sizes.target_raw, c, &target_shift, base + 2)?,
            target_test: generate_domain_dataset("target_test", sizes.target_test, 0, c, &target_shift, base + 3)?,
        })
    }
}

pub fn write_png(plane: &Plane, path: &Path) -> Result<()> {
    let buf: Vec<u8> = plane
        .data
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::GrayImage::from_raw(plane.width as u32, plane.height as u32, buf)
        .ok_or_else(|| Error::Shape("plane buffer does not match its size".into()))?;
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes samples as `<id>.png` into `images_dir` (and masks, when
/// present, into `masks_dir`).
pub fn write_samples(samples: &[Sample], images_dir: &Path, masks_dir: Option<&Path>) -> Result<()> {
    std::fs::create_dir_all(images_dir).at(images_dir)?;
    if let Some(m) = masks_dir {
        std::fs::create_dir_all(m).at(m)?;
    }
    for s in samples {
        write_png(&s.image, &images_dir.join(format!("{}.png", s.id)))?;
        if let (Some(mask), Some(dir)) = (&s.mask, masks_dir) {
            write_png(mask, &dir.join(format!("{}.png", s.id)))?;
        }
    }
    Ok(())
}
