//! Outpainting task construction: border-band filling maps, smooth
//! structure computation, covered/ground-truth input pairs, and the
//! deterministic dataset stream.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imageio;
use crate::scalar::Scalar;
use crate::shape::Shape;
use crate::tensor::Tensor;

/// Which borders get synthesized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FillingMode {
    /// Equal-width bands on the left and right borders.
    TwoDirection,
    /// Right border only.
    SingleDirection,
}

impl FillingMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "two_direction" => Some(FillingMode::TwoDirection),
            "single_direction" => Some(FillingMode::SingleDirection),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            FillingMode::TwoDirection => "two_direction",
            FillingMode::SingleDirection => "single_direction",
        }
    }
}

/// How the smooth structure map is produced.
#[derive(Clone, Debug, PartialEq)]
pub enum SmoothMethod {
    Gaussian { sigma: f64 },
    /// Edge-preserving iterative filter: joint spatial/range weighting.
    Bilateral { iterations: usize, sigma_spatial: f64, sigma_range: f64 },
    /// Precomputed map on disk, resized to the target size.
    FromFile { path: PathBuf },
}

/// One outpainting instance. All image tensors are (1, 3, H, W) in [-1, 1];
/// the filling map is (1, 1, H, W) with 1 marking pixels to predict.
/// The covered canvas and structure are zero under the map.
#[derive(Clone, Debug)]
pub struct FillingTask<T> {
    pub x: Tensor<T>,
    pub m: Tensor<T>,
    pub s: Tensor<T>,
    pub y: Tensor<T>,
    pub s_gt: Tensor<T>,
    pub mode: FillingMode,
    pub ratio: f64,
}

/// Full-height border band mask, band width round(ratio * width) per
/// extrapolated side.
pub fn band_mask<T: Scalar>(h: usize, w: usize, mode: FillingMode, ratio: f64) -> Result<Tensor<T>> {
    check_ratio(ratio)?;
    let band = (ratio * w as f64).round() as usize;
    let mut data = vec![T::zero(); h * w];
    for y in 0..h {
        for x in 0..w {
            let in_right = x >= w - band;
            let in_left = x < band;
            let covered = match mode {
                FillingMode::TwoDirection => in_left || in_right,
                FillingMode::SingleDirection => in_right,
            };
            if covered {
                data[y * w + x] = T::one();
            }
        }
    }
    Tensor::from_vec(Shape::new(1, 1, h, w), data)
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(ratio > 0.0 && ratio < 0.5) {
        return Err(Error::BadArg {
            op: "make_filling_task",
            reason: format!("ratio must lie in (0, 0.5), got {ratio}"),
        });
    }
    Ok(())
}

/// Zero `t` wherever the single-channel mask is 1.
pub fn apply_cover<T: Scalar>(t: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
    let (s, ms) = (t.shape(), mask.shape());
    if !ms.broadcasts_with(&s) {
        return Err(Error::ShapeMismatch { op: "apply_cover", lhs: ms, rhs: s });
    }
    let n = s.plane();
    let mut out = t.data().to_vec();
    for b in 0..s.b {
        for c in 0..s.c {
            let mp = (b * ms.c + c.min(ms.c - 1)) * n;
            let tp = (b * s.c + c) * n;
            for i in 0..n {
                if mask.data()[mp + i] != T::zero() {
                    out[tp + i] = T::zero();
                }
            }
        }
    }
    Tensor::from_vec(s, out)
}

impl<T: Scalar> FillingTask<T> {
    /// Assemble a task from a ground-truth image and its structure map
    /// (both already at the target size).
    pub fn build(y: Tensor<T>, s_gt: Tensor<T>, mode: FillingMode, ratio: f64) -> Result<Self> {
        let shape = y.shape();
        if s_gt.shape() != shape {
            return Err(Error::ShapeMismatch { op: "filling_task", lhs: shape, rhs: s_gt.shape() });
        }
        let m = band_mask(shape.h, shape.w, mode, ratio)?;
        let x = apply_cover(&y, &m)?;
        let s = apply_cover(&s_gt, &m)?;
        Ok(FillingTask { x, m, s, y, s_gt, mode, ratio })
    }
}

/// Resize to `size` x `size`, compute the structure map, cover the bands.
pub fn make_filling_task<T: Scalar>(
    image: &Tensor<T>,
    mode: FillingMode,
    ratio: f64,
    size: usize,
    smooth: &SmoothMethod,
) -> Result<FillingTask<T>> {
    check_ratio(ratio)?;
    let y = imageio::resize_bilinear(image, size, size)?;
    let s_gt = smooth_structure(&y, smooth)?;
    FillingTask::build(y, s_gt, mode, ratio)
}

/// Smooth structure map of `image`, same shape.
pub fn smooth_structure<T: Scalar>(image: &Tensor<T>, method: &SmoothMethod) -> Result<Tensor<T>> {
    match method {
        SmoothMethod::Gaussian { sigma } => gaussian_blur(image, *sigma),
        SmoothMethod::Bilateral { iterations, sigma_spatial, sigma_range } => {
            let mut out = image.clone();
            for _ in 0..*iterations {
                out = bilateral_pass(&out, *sigma_spatial, *sigma_range)?;
            }
            Ok(out)
        }
        SmoothMethod::FromFile { path } => {
            if !path.exists() {
                return Err(Error::Dataset(format!("structure file {} not found", path.display())));
            }
            let s = imageio::load_image::<T>(path)?;
            imageio::resize_bilinear(&s, image.shape().h, image.shape().w)
        }
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as usize;
    if radius == 0 {
        return vec![1.0];
    }
    let mut k = Vec::with_capacity(2 * radius + 1);
    for i in 0..=2 * radius {
        let d = i as f64 - radius as f64;
        k.push((-d * d / (2.0 * sigma * sigma)).exp());
    }
    let sum: f64 = k.iter().sum();
    k.iter().map(|v| v / sum).collect()
}

/// Separable Gaussian blur with replicate (clamp) boundary. sigma -> 0
/// degenerates to the identity.
pub fn gaussian_blur<T: Scalar>(image: &Tensor<T>, sigma: f64) -> Result<Tensor<T>> {
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(Error::BadArg { op: "gaussian_blur", reason: format!("bad sigma {sigma}") });
    }
    let k = gaussian_kernel(sigma);
    if k.len() == 1 {
        return Ok(image.clone());
    }
    let radius = k.len() / 2;
    let s = image.shape();
    let (h, w) = (s.h, s.w);
    let mut out = vec![T::zero(); s.numel()];
    let mut tmp = vec![0.0f64; h * w];
    for plane in 0..s.b * s.c {
        let src = &image.data()[plane * h * w..(plane + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, &kv) in k.iter().enumerate() {
                    let sx = (x + i).saturating_sub(radius).min(w - 1);
                    acc += kv * src[y * w + sx].as_f64();
                }
                tmp[y * w + x] = acc;
            }
        }
        let dst = &mut out[plane * h * w..(plane + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, &kv) in k.iter().enumerate() {
                    let sy = (y + i).saturating_sub(radius).min(h - 1);
                    acc += kv * tmp[sy * w + x];
                }
                dst[y * w + x] = T::from_f64(acc);
            }
        }
    }
    Tensor::from_vec(s, out)
}

fn bilateral_pass<T: Scalar>(image: &Tensor<T>, sigma_s: f64, sigma_r: f64) -> Result<Tensor<T>> {
    if sigma_s <= 0.0 || sigma_r <= 0.0 {
        return Err(Error::BadArg { op: "bilateral", reason: "sigmas must be positive".into() });
    }
    let radius = (2.0 * sigma_s).ceil() as isize;
    let s = image.shape();
    let (h, w) = (s.h as isize, s.w as isize);
    let mut out = vec![T::zero(); s.numel()];
    for plane in 0..s.b * s.c {
        let src = &image.data()[plane * s.plane()..(plane + 1) * s.plane()];
        let dst = &mut out[plane * s.plane()..(plane + 1) * s.plane()];
        for y in 0..h {
            for x in 0..w {
                let center = src[(y * w + x) as usize].as_f64();
                let mut acc = 0.0;
                let mut norm = 0.0;
                for dy in -radius..=radius {
                    for dx in -radius..=radius {
                        let (sy, sx) = ((y + dy).clamp(0, h - 1), (x + dx).clamp(0, w - 1));
                        let v = src[(sy * w + sx) as usize].as_f64();
                        let ds = (dy * dy + dx * dx) as f64;
                        let dr = v - center;
                        let weight = (-ds / (2.0 * sigma_s * sigma_s)).exp()
                            * (-dr * dr / (2.0 * sigma_r * sigma_r)).exp();
                        acc += weight * v;
                        norm += weight;
                    }
                }
                dst[(y * w + x) as usize] = T::from_f64(acc / norm);
            }
        }
    }
    Tensor::from_vec(s, out)
}

/// Mirror the width axis (augmentation).
pub fn hflip<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let s = t.shape();
    let mut out = vec![T::zero(); s.numel()];
    for plane in 0..s.b * s.c {
        let src = &t.data()[plane * s.plane()..(plane + 1) * s.plane()];
        let dst = &mut out[plane * s.plane()..(plane + 1) * s.plane()];
        for y in 0..s.h {
            for x in 0..s.w {
                dst[y * s.w + x] = src[y * s.w + (s.w - 1 - x)];
            }
        }
    }
    Tensor::from_vec(s, out).expect("same shape")
}

/// Stack (1, c, h, w) tensors along the batch axis.
pub fn stack_batch<T: Scalar>(items: &[Tensor<T>]) -> Result<Tensor<T>> {
    if items.is_empty() {
        return Err(Error::BadArg { op: "stack_batch", reason: "empty batch".into() });
    }
    let s0 = items[0].shape();
    let mut data = Vec::with_capacity(items.len() * s0.numel());
    for item in items {
        if item.shape() != s0 {
            return Err(Error::ShapeMismatch { op: "stack_batch", lhs: s0, rhs: item.shape() });
        }
        data.extend_from_slice(item.data());
    }
    Tensor::from_vec(Shape::new(items.len() * s0.b, s0.c, s0.h, s0.w), data)
}

/// A dataset loaded into memory: ground-truth images and their structure
/// maps at the training resolution, sorted by file name.
pub struct Dataset<T> {
    pub names: Vec<String>,
    images: Vec<Tensor<T>>,
    structures: Vec<Tensor<T>>,
}

/// Batched, stacked network inputs for one iteration.
pub struct Batch<T> {
    pub x: Tensor<T>,
    pub m: Tensor<T>,
    pub s: Tensor<T>,
    pub y: Tensor<T>,
    pub s_gt: Tensor<T>,
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::Dataset(format!("{}: {e}", dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                Some("png") | Some("ppm")
            )
        })
        .collect();
    files.sort();
    Ok(files)
}

impl<T: Scalar> Dataset<T> {
    /// Loads `dir` (PNG/PPM), resizing to `size`. Structure maps come from
    /// `structure_dir` when a file with the same stem exists there, and
    /// from `fallback` otherwise.
    pub fn load(
        dir: &Path,
        structure_dir: Option<&Path>,
        size: usize,
        fallback: &SmoothMethod,
    ) -> Result<Self> {
        let files = list_images(dir)?;
        if files.is_empty() {
            return Err(Error::Dataset(format!("no images found in {}", dir.display())));
        }
        let mut names = Vec::new();
        let mut images = Vec::new();
        let mut structures = Vec::new();
        for file in files {
            let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            let raw = imageio::load_image::<T>(&file)?;
            let y = imageio::resize_bilinear(&raw, size, size)?;
            let structure_file = structure_dir.and_then(|sd| {
                ["png", "ppm"]
                    .iter()
                    .map(|ext| sd.join(format!("{stem}.{ext}")))
                    .find(|p| p.exists())
            });
            let s_gt = match structure_file {
                Some(path) => smooth_structure(&y, &SmoothMethod::FromFile { path })?,
                None => smooth_structure(&y, fallback)?,
            };
            names.push(stem);
            images.push(y);
            structures.push(s_gt);
        }
        Ok(Dataset { names, images, structures })
    }

    /// In-memory dataset (tests, synthetic runs).
    pub fn from_tensors(names: Vec<String>, images: Vec<Tensor<T>>, structures: Vec<Tensor<T>>) -> Result<Self> {
        if images.is_empty() || images.len() != structures.len() || images.len() != names.len() {
            return Err(Error::Dataset("images/structures/names must be equal-length and nonempty".into()));
        }
        Ok(Dataset { names, images, structures })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn batches_per_epoch(&self, batch_size: usize) -> usize {
        self.len().div_ceil(batch_size)
    }

    /// Seeded permutation for one epoch.
    pub fn epoch_order(&self, seed: u64, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed, epoch));
        order.shuffle(&mut rng);
        order
    }

    /// Item indices of global batch `iteration`: a pure function of
    /// (seed, iteration), so resuming at any point replays the stream.
    pub fn batch_indices(&self, seed: u64, batch_size: usize, iteration: u64) -> Vec<usize> {
        let bpe = self.batches_per_epoch(batch_size) as u64;
        let epoch = iteration / bpe;
        let slot = (iteration % bpe) as usize;
        let order = self.epoch_order(seed, epoch);
        order[slot * batch_size..(slot * batch_size + batch_size).min(order.len())].to_vec()
    }

    /// Assemble the stacked batch for one iteration. Horizontal flips, when
    /// enabled, are decided per (seed, iteration, item).
    pub fn batch(
        &self,
        seed: u64,
        batch_size: usize,
        iteration: u64,
        mode: FillingMode,
        ratio: f64,
        flip: bool,
    ) -> Result<Batch<T>> {
        let indices = self.batch_indices(seed, batch_size, iteration);
        let mut xs = Vec::new();
        let mut ms = Vec::new();
        let mut ss = Vec::new();
        let mut ys = Vec::new();
        let mut sgts = Vec::new();
        for (pos, &idx) in indices.iter().enumerate() {
            let mut y = self.images[idx].clone();
            let mut s_gt = self.structures[idx].clone();
            if flip && mix64(mix64(seed, iteration), pos as u64) & 1 == 1 {
                y = hflip(&y);
                s_gt = hflip(&s_gt);
            }
            let task = FillingTask::build(y, s_gt, mode, ratio)?;
            xs.push(task.x);
            ms.push(task.m);
            ss.push(task.s);
            ys.push(task.y);
            sgts.push(task.s_gt);
        }
        Ok(Batch {
            x: stack_batch(&xs)?,
            m: stack_batch(&ms)?,
            s: stack_batch(&ss)?,
            y: stack_batch(&ys)?,
            s_gt: stack_batch(&sgts)?,
        })
    }
}

/// splitmix64-style mixing of two words into one seed.
pub fn mix64(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}
