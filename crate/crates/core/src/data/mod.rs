//! Image I/O, degradations, patch sampling and augmentation.

pub mod dihedral;
mod image_io;
mod synth;

use std::fmt;
use std::path::{Path, PathBuf};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, ScnError};
use crate::resample::bicubic_resize;
use crate::tensor::Tensor;

pub use image_io::{load_image, quantize, save_image};
pub use synth::{synthetic_corpus, textured_image};

/// How a degraded input is produced from a clean target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradationSpec {
    /// Bicubic downscaling by an integer factor.
    SrBicubic(usize),
    /// Additive white Gaussian noise, sigma on the 0-255 scale.
    GaussianNoise(f64),
    /// Degraded files with the same names in another directory.
    PrecomputedPairs(PathBuf),
}

impl fmt::Display for DegradationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DegradationSpec::SrBicubic(factor) => write!(f, "sr_bicubic(x{factor})"),
            DegradationSpec::GaussianNoise(sigma) => write!(f, "gaussian_noise(sigma={sigma})"),
            DegradationSpec::PrecomputedPairs(dir) => write!(f, "precomputed_pairs({})", dir.display()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairMeta {
    pub source: PathBuf,
    pub degradation: String,
}

/// Degraded input and clean target, both `(1, c, h, w)` in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct ImagePair {
    pub degraded: Tensor,
    pub target: Tensor,
    pub meta: PairMeta,
}

impl ImagePair {
    /// Target size over degraded size (1 for same-size tasks).
    pub fn factor(&self) -> usize {
        self.target.height() / self.degraded.height().max(1)
    }
}

/// Sub-window `(y, x, h, w)` of every plane.
pub fn crop(t: &Tensor, y: usize, x: usize, h: usize, w: usize) -> Result<Tensor> {
    let [n, c, th, tw] = t.dims();
    if y + h > th || x + w > tw {
        return Err(ScnError::shape(format!(
            "crop ({y}, {x}) size {h}x{w} exceeds {th}x{tw}"
        )));
    }
    let mut out = Vec::with_capacity(n * c * h * w);
    for p in 0..n * c {
        for row in y..y + h {
            let start = (p * th + row) * tw + x;
            out.extend_from_slice(&t.data()[start..start + w]);
        }
    }
    Tensor::from_vec([n, c, h, w], out)
}

/// Removes `border` pixels from every side.
pub fn shave(t: &Tensor, border: usize) -> Result<Tensor> {
    let (h, w) = t.spatial();
    if 2 * border >= h || 2 * border >= w {
        return Err(ScnError::shape(format!("cannot shave {border} pixels from {h}x{w}")));
    }
    crop(t, border, border, h - 2 * border, w - 2 * border)
}

/// Converts between 1 and 3 channels. RGB to gray uses BT.601 luma weights.
pub fn to_channels(t: &Tensor, channels: usize) -> Result<Tensor> {
    let [n, c, h, w] = t.dims();
    match (c, channels) {
        (a, b) if a == b => Ok(t.clone()),
        (3, 1) => {
            let plane = h * w;
            let mut out = Vec::with_capacity(n * plane);
            for b in 0..n {
                let base = b * 3 * plane;
                let d = &t.data()[base..base + 3 * plane];
                out.extend((0..plane).map(|p| 0.299 * d[p] + 0.587 * d[plane + p] + 0.114 * d[2 * plane + p]));
            }
            Tensor::from_vec([n, 1, h, w], out)
        }
        (1, 3) => {
            let plane = h * w;
            let mut out = Vec::with_capacity(n * 3 * plane);
            for b in 0..n {
                let d = &t.data()[b * plane..(b + 1) * plane];
                for _ in 0..3 {
                    out.extend_from_slice(d);
                }
            }
            Tensor::from_vec([n, 3, h, w], out)
        }
        _ => Err(ScnError::shape(format!("cannot convert {c} channels to {channels}"))),
    }
}

/// Adds `N(0, (sigma/255)^2)` noise. Values are not clamped.
pub fn add_gaussian_noise(t: &Tensor, sigma: f64, seed: u64) -> Result<Tensor> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(ScnError::config(format!("noise sigma must be finite and >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(t.detach());
    }
    let normal = Normal::new(0.0, sigma / 255.0).expect("positive sigma");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = t
        .data()
        .iter()
        .map(|&v| (v as f64 + normal.sample(&mut rng)) as f32)
        .collect();
    Tensor::from_vec(t.dims(), data)
}

/// Builds the degraded counterpart of `img`. For super-resolution the target
/// is first cropped to a multiple of the factor.
pub fn degrade(img: &Tensor, source: &Path, spec: &DegradationSpec, seed: u64) -> Result<ImagePair> {
    let meta = PairMeta {
        source: source.to_path_buf(),
        degradation: spec.to_string(),
    };
    let (h, w) = img.spatial();
    match spec {
        DegradationSpec::SrBicubic(factor) => {
            let f = *factor;
            if f == 0 {
                return Err(ScnError::config("super-resolution factor must be >= 1"));
            }
            let (lh, lw) = (h / f, w / f);
            if lh == 0 || lw == 0 {
                return Err(ScnError::Dataset(format!(
                    "{}: {h}x{w} is smaller than the factor {f}",
                    source.display()
                )));
            }
            let target = crop(img, 0, 0, lh * f, lw * f)?;
            let degraded = bicubic_resize(&target, lh, lw)?.map(|v| v.clamp(0.0, 1.0));
            Ok(ImagePair { degraded, target, meta })
        }
        DegradationSpec::GaussianNoise(sigma) => Ok(ImagePair {
            degraded: add_gaussian_noise(img, *sigma, seed)?,
            target: img.detach(),
            meta,
        }),
        DegradationSpec::PrecomputedPairs(dir) => {
            let name = source
                .file_name()
                .ok_or_else(|| ScnError::Dataset(format!("{} has no file name", source.display())))?;
            let path = dir.join(name);
            if !path.is_file() {
                return Err(ScnError::Dataset(format!("missing degraded file {}", path.display())));
            }
            let degraded = to_channels(&load_image(&path)?, img.channels())?;
            if degraded.spatial() != img.spatial() {
                return Err(ScnError::Dataset(format!(
                    "{} is {:?} but its target is {:?}",
                    path.display(),
                    degraded.spatial(),
                    img.spatial()
                )));
            }
            Ok(ImagePair {
                degraded,
                target: img.detach(),
                meta,
            })
        }
    }
}

/// `count` random aligned patch pairs of `patch` pixels (degraded domain).
pub fn sample_patches(pair: &ImagePair, patch: usize, count: usize, seed: u64) -> Result<Vec<ImagePair>> {
    let (h, w) = pair.degraded.spatial();
    if patch == 0 || patch > h || patch > w {
        return Err(ScnError::Dataset(format!(
            "{}: patch {patch} does not fit a {h}x{w} image",
            pair.meta.source.display()
        )));
    }
    let f = pair.factor();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let y = rng.random_range(0..=h - patch);
            let x = rng.random_range(0..=w - patch);
            patch_at(pair, y, x, patch, f)
        })
        .collect()
}

fn patch_at(pair: &ImagePair, y: usize, x: usize, patch: usize, f: usize) -> Result<ImagePair> {
    Ok(ImagePair {
        degraded: crop(&pair.degraded, y, x, patch, patch)?,
        target: crop(&pair.target, f * y, f * x, f * patch, f * patch)?,
        meta: pair.meta.clone(),
    })
}

/// Applies dihedral element `idx` to both members.
pub fn augment(pair: &ImagePair, idx: usize) -> Result<ImagePair> {
    Ok(ImagePair {
        degraded: dihedral::transform(&pair.degraded, idx)?,
        target: dihedral::transform(&pair.target, idx)?,
        meta: pair.meta.clone(),
    })
}

/// Sorted `*.png` files directly inside `dir`.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| ScnError::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| ScnError::io(dir, e))?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Clean images with their source paths.
#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub images: Vec<(PathBuf, Tensor)>,
}

impl Corpus {
    /// Every PNG in `dir`, converted to `channels`.
    pub fn from_dir(dir: &Path, channels: usize) -> Result<Self> {
        let files = list_pngs(dir)?;
        if files.is_empty() {
            return Err(ScnError::Dataset(format!("no PNG files in {}", dir.display())));
        }
        let images = files
            .into_iter()
            .map(|p| {
                let img = to_channels(&load_image(&p)?, channels)?;
                Ok((p, img))
            })
            .collect::<Result<_>>()?;
        Ok(Corpus { images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Splits off the last `round(fraction * len)` images, keeping at least
    /// one for training.
    pub fn split(self, fraction: f64) -> (Corpus, Corpus) {
        let n = self.images.len();
        let held = ((fraction.clamp(0.0, 1.0) * n as f64).round() as usize).min(n.saturating_sub(1));
        let mut images = self.images;
        let val = images.split_off(n - held);
        (Corpus { images }, Corpus { images: val })
    }

    /// Degrades every image once with a per-image seed.
    pub fn pairs(&self, spec: &DegradationSpec, seed: u64) -> Result<Vec<ImagePair>> {
        self.images
            .iter()
            .enumerate()
            .map(|(i, (p, img))| degrade(img, p, spec, crate::seed::derive(seed, &[i as u64])))
            .collect()
    }
}
