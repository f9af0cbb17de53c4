//! Samples, domain datasets, few-shot splits and raw-image pairing.
//!
//! All randomness here comes from [`ChaCha8Rng`] seeded with
//! `seed_from_u64`; subset draws use `rand::seq::index::sample`, so a given
//! `(dataset, k, seed)` always selects the same ids.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, IoContext, Result};

/// A single-channel image plane stored row-major. Converts to a
/// `1×1×H×W` tensor with [`Plane::to_tensor`].
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Plane {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "plane {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_vec(
            self.data.clone(),
            (1, 1, self.height, self.width),
            &Device::Cpu,
        )?)
    }

    /// Reads channel 0 of batch row `row` of a `B×C×H×W` tensor.
    pub fn from_tensor(t: &Tensor, row: usize) -> Result<Self> {
        let (_, _, h, w) = t.dims4()?;
        let data = t
            .narrow(0, row, 1)?
            .narrow(1, 0, 1)?
            .flatten_all()?
            .to_dtype(candle_core::DType::F32)?
            .to_vec1::<f32>()?;
        Self::new(h, w, data)
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::Shape(format!(
                "crop {h}x{w} at ({y0},{x0}) exceeds plane {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(h * w);
        for y in y0..y0 + h {
            let start = y * self.width + x0;
            data.extend_from_slice(&self.data[start..start + w]);
        }
        Ok(Self {
            height: h,
            width: w,
            data,
        })
    }

    pub fn flipped(&self, horizontal: bool, vertical: bool) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            let sy = if vertical { self.height - 1 - y } else { y };
            for x in 0..self.width {
                let sx = if horizontal { self.width - 1 - x } else { x };
                out.data[y * self.width + x] = self.data[sy * self.width + sx];
            }
        }
        out
    }

    /// Rescales to [0, 1]; a constant plane maps to all zeros.
    pub fn min_max_normalized(&self) -> Self {
        let (lo, hi) = self
            .data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        let span = hi - lo;
        let data = if span > 0.0 {
            self.data.iter().map(|&v| (v - lo) / span).collect()
        } else {
            vec![0.0; self.data.len()]
        };
        Self { data, ..*self }
    }

    pub fn binarized(&self) -> Self {
        let data = self
            .data
            .iter()
            .map(|&v| if v > 0.0 { 1.0 } else { 0.0 })
            .collect();
        Self { data, ..*self }
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Plane,
    pub mask: Option<Plane>,
    pub domain_tag: String,
}

impl Sample {
    pub fn new(
        id: impl Into<String>,
        image: Plane,
        mask: Option<Plane>,
        domain_tag: impl Into<String>,
    ) -> Result<Self> {
        let id = id.into();
        if let Some(m) = &mask {
            if m.dims() != image.dims() {
                return Err(Error::Shape(format!(
                    "sample `{id}`: mask {:?} does not match image {:?}",
                    m.dims(),
                    image.dims()
                )));
            }
            if m.data.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Data(format!("sample `{id}`: mask is not binary")));
            }
        }
        if image.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data(format!(
                "sample `{id}`: image intensities leave [0, 1]"
            )));
        }
        Ok(Self {
            id,
            image,
            mask,
            domain_tag: domain_tag.into(),
        })
    }

    pub fn without_mask(&self) -> Self {
        Self {
            mask: None,
            ..self.clone()
        }
    }

    pub fn flipped(&self, horizontal: bool, vertical: bool) -> Self {
        Self {
            id: self.id.clone(),
            image: self.image.flipped(horizontal, vertical),
            mask: self.mask.as_ref().map(|m| m.flipped(horizontal, vertical)),
            domain_tag: self.domain_tag.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub name: String,
    pub raw: Vec<Sample>,
    pub annotated: Vec<Sample>,
}

impl DomainDataset {
    /// Builds a dataset, sorting both lists by id and rejecting duplicate ids.
    pub fn new(name: impl Into<String>, mut raw: Vec<Sample>, mut annotated: Vec<Sample>) -> Result<Self> {
        let name = name.into();
        if let Some(s) = raw.iter().find(|s| s.mask.is_some()) {
            return Err(Error::Data(format!("raw sample `{}` carries a mask", s.id)));
        }
        if let Some(s) = annotated.iter().find(|s| s.mask.is_none()) {
            return Err(Error::Data(format!("annotated sample `{}` has no mask", s.id)));
        }
        let mut seen = HashSet::new();
        for s in raw.iter().chain(&annotated) {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Data(format!(
                    "duplicate sample id `{}` in dataset `{name}`",
                    s.id
                )));
            }
        }
        raw.sort_by(|a, b| a.id.cmp(&b.id));
        annotated.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(Self {
            name,
            raw,
            annotated,
        })
    }

    pub fn len(&self) -> usize {
        self.raw.len() + self.annotated.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn annotated_ids(&self) -> Vec<&str> {
        self.annotated.iter().map(|s| s.id.as_str()).collect()
    }

    pub fn find_annotated(&self, id: &str) -> Option<&Sample> {
        self.annotated
            .binary_search_by(|s| s.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.annotated[i])
    }

    /// Union of two datasets under `self.name`.
    pub fn merged(self, other: DomainDataset) -> Result<Self> {
        let mut raw = self.raw;
        raw.extend(other.raw);
        let mut annotated = self.annotated;
        annotated.extend(other.annotated);
        Self::new(self.name, raw, annotated)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FewShotSplit {
    pub shots: usize,
    pub selected_ids: Vec<String>,
    pub seed: u64,
}

impl FewShotSplit {
    /// Resolves the split against `dataset`, failing on unknown or repeated ids.
    pub fn samples<'a>(&self, dataset: &'a DomainDataset) -> Result<Vec<&'a Sample>> {
        if self.selected_ids.len() != self.shots || self.shots == 0 {
            return Err(Error::Data(format!(
                "split declares {} shots but lists {} ids",
                self.shots,
                self.selected_ids.len()
            )));
        }
        let mut seen = HashSet::new();
        self.selected_ids
            .iter()
            .map(|id| {
                if !seen.insert(id.as_str()) {
                    return Err(Error::Data(format!("split repeats id `{id}`")));
                }
                dataset.find_annotated(id).ok_or_else(|| {
                    Error::Data(format!(
                        "split id `{id}` is not an annotated sample of `{}`",
                        dataset.name
                    ))
                })
            })
            .collect()
    }
}

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "tif", "tiff"];

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn file_id(path: &Path) -> Result<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_string)
        .ok_or_else(|| Error::Data(format!("{}: file name is not valid UTF-8", path.display())))
}

fn list_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).at(dir)? {
        let path = entry.at(dir)?.path();
        if path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Decodes a grayscale-convertible PNG/TIFF into raw intensities.
pub fn read_gray(path: &Path) -> Result<Plane> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let luma = img.to_luma32f();
    let (w, h) = luma.dimensions();
    Plane::new(h as usize, w as usize, luma.into_raw())
}

/// Loads every image in `images_path`. With `masks_path` the samples are
/// annotated and each image needs a mask with the same file stem.
pub fn load_image_dir(
    images_path: &Path,
    masks_path: Option<&Path>,
    domain_tag: &str,
) -> Result<DomainDataset> {
    if !images_path.is_dir() {
        return Err(Error::Data(format!(
            "image directory {} does not exist",
            images_path.display()
        )));
    }
    let files = list_files(images_path)?;
    if files.is_empty() {
        return Err(Error::Data(format!(
            "image directory {} is empty",
            images_path.display()
        )));
    }
    let masks_by_id = match masks_path {
        Some(dir) => {
            let mut map = std::collections::HashMap::new();
            for p in list_files(dir)? {
                if is_image_file(&p) {
                    map.insert(file_id(&p)?, p);
                }
            }
            Some(map)
        }
        None => None,
    };

    let mut raw = Vec::new();
    let mut annotated = Vec::new();
    for path in &files {
        if !is_image_file(path) {
            return Err(Error::Data(format!(
                "{} is not a PNG or TIFF image",
                path.display()
            )));
        }
        let id = file_id(path)?;
        let image = read_gray(path)?.min_max_normalized();
        match &masks_by_id {
            Some(map) => {
                let mask_path = map.get(&id).ok_or_else(|| {
                    Error::Data(format!(
                        "missing mask for image `{id}` in {}",
                        masks_path.unwrap().display()
                    ))
                })?;
                let mask = read_gray(mask_path)?.binarized();
                annotated.push(Sample::new(id, image, Some(mask), domain_tag)?);
            }
            None => raw.push(Sample::new(id, image, None, domain_tag)?),
        }
    }
    DomainDataset::new(domain_tag, raw, annotated)
}

pub fn make_few_shot_split(dataset: &DomainDataset, k: usize, seed: u64) -> Result<FewShotSplit> {
    let n = dataset.annotated.len();
    if k == 0 {
        return Err(Error::Data("few-shot split needs at least one shot".into()));
    }
    if k > n {
        return Err(Error::Data(format!(
            "cannot draw {k} shots from `{}`: only {n} annotated samples",
            dataset.name
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let selected_ids = index::sample(&mut rng, n, k)
        .into_iter()
        .map(|i| dataset.annotated[i].id.clone())
        .collect();
    Ok(FewShotSplit {
        shots: k,
        selected_ids,
        seed,
    })
}

fn draw_indices(rng: &mut ChaCha8Rng, pool: usize, n: usize) -> Vec<usize> {
    if pool >= n {
        index::sample(rng, pool, n).into_vec()
    } else {
        (0..n).map(|_| rng.random_range(0..pool)).collect()
    }
}

/// Draws `n_pairs` (source, target) raw pairs. Each side samples without
/// replacement when its pool is large enough, otherwise with replacement.
pub fn pair_raw_batches(
    source: &DomainDataset,
    target: &DomainDataset,
    n_pairs: usize,
    seed: u64,
) -> Result<Vec<(Sample, Sample)>> {
    for ds in [source, target] {
        if ds.raw.is_empty() {
            return Err(Error::Data(format!(
                "dataset `{}` has no raw images to pair",
                ds.name
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let src = draw_indices(&mut rng, source.raw.len(), n_pairs);
    let tgt = draw_indices(&mut rng, target.raw.len(), n_pairs);
    Ok(src
        .into_iter()
        .zip(tgt)
        .map(|(i, j)| (source.raw[i].clone(), target.raw[j].clone()))
        .collect())
}

/// Square crop with coordinates drawn from `rng`; the mask is cut at the
/// same location.
pub fn random_crop<R: Rng + ?Sized>(sample: &Sample, patch_size: usize, rng: &mut R) -> Result<Sample> {
    let (h, w) = sample.image.dims();
    if patch_size == 0 || patch_size > h.min(w) {
        return Err(Error::Shape(format!(
            "patch {patch_size} does not fit sample `{}` of size {h}x{w}",
            sample.id
        )));
    }
    let y0 = rng.random_range(0..=h - patch_size);
    let x0 = rng.random_range(0..=w - patch_size);
    Ok(Sample {
        id: sample.id.clone(),
        image: sample.image.crop(y0, x0, patch_size, patch_size)?,
        mask: sample
            .mask
            .as_ref()
            .map(|m| m.crop(y0, x0, patch_size, patch_size))
            .transpose()?,
        domain_tag: sample.domain_tag.clone(),
    })
}
