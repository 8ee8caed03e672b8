//! Dataset manifests with their train subsets, plus the synthetic
//! speckle-lesion generator used for desk-scale runs.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::rng::{self, domain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s.trim() {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_path: String,
    pub mask_path: Option<String>,
    pub split: Split,
}

impl ManifestEntry {
    /// Sample id: the file stem of the image path.
    pub fn id(&self) -> &str {
        let name = self
            .image_path
            .rsplit(['/', '\\'])
            .next()
            .unwrap_or(&self.image_path);
        match name.rfind('.') {
            Some(i) if i > 0 => &name[..i],
            _ => name,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Validates unique image paths and unique ids.
    pub fn new(name: impl Into<String>, entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut paths = BTreeSet::new();
        let mut ids = BTreeSet::new();
        for e in &entries {
            if !paths.insert(e.image_path.as_str()) {
                return Err(Error::Data(format!(
                    "duplicate image path `{}`",
                    e.image_path
                )));
            }
            if !ids.insert(e.id()) {
                return Err(Error::Data(format!("duplicate sample id `{}`", e.id())));
            }
        }
        Ok(DatasetManifest {
            name: name.into(),
            entries,
        })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// `(train, val, test)` entry counts.
    pub fn split_counts(&self) -> (usize, usize, usize) {
        let count = |s| self.split(s).count();
        (count(Split::Train), count(Split::Val), count(Split::Test))
    }

    /// Keeps `floor(fraction * |train|)` train entries, chosen by a seeded
    /// shuffle. Val and test entries are untouched.
    ///
    /// The same seed always yields the same shuffle order, so a smaller
    /// fraction selects a prefix of what a larger fraction selects.
    pub fn take_train_subset(&self, spec: SubsetSpec) -> Result<DatasetManifest> {
        let keep = train_subset_indices(self.split(Split::Train).count(), spec)?;
        let mut train_pos = 0usize;
        let entries = self
            .entries
            .iter()
            .filter(|e| {
                if e.split != Split::Train {
                    return true;
                }
                let selected = keep.contains(&train_pos);
                train_pos += 1;
                selected
            })
            .cloned()
            .collect();
        Ok(DatasetManifest {
            name: self.name.clone(),
            entries,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubsetSpec {
    pub fraction: f64,
    pub seed: u64,
}

/// Positions (within the train split) kept by a subset draw.
pub fn train_subset_indices(train_len: usize, spec: SubsetSpec) -> Result<BTreeSet<usize>> {
    if !(spec.fraction > 0.0 && spec.fraction <= 1.0) {
        return Err(Error::arg(format!(
            "train fraction must be in (0, 1], got {}",
            spec.fraction
        )));
    }
    let count = libm::floor(spec.fraction * train_len as f64) as usize;
    let mut order: Vec<usize> = (0..train_len).collect();
    order.shuffle(&mut rng::stream(spec.seed, &[domain::SUBSET]));
    Ok(order.into_iter().take(count).collect())
}

/// Selects the subset from an in-memory list, preserving input order.
pub fn take_subset<T: Clone>(items: &[T], spec: SubsetSpec) -> Result<Vec<T>> {
    let keep = train_subset_indices(items.len(), spec)?;
    Ok(items
        .iter()
        .enumerate()
        .filter(|(i, _)| keep.contains(i))
        .map(|(_, t)| t.clone())
        .collect())
}

/// Intensity model of the synthetic generator.
pub const SYNTH_BACKGROUND: f64 = 0.1;
pub const SYNTH_LESION: f64 = 0.45;
pub const SYNTH_SPECKLE: f64 = 0.3;
pub const SYNTH_BLUR_SIGMA: f64 = 1.0;

/// Semi-axis bounds as fractions of the shorter image side. The upper bound
/// keeps the lesion area under `pi * 0.3^2 ~ 28%` of a square image.
const SEMI_AXIS_MIN: f64 = 0.08;
const SEMI_AXIS_MAX: f64 = 0.3;

/// Generates `n` images, each with one elliptical lesion, multiplicative
/// speckle and a Gaussian blur, plus the matching lesion masks.
pub fn generate_synthetic_dataset(
    n: usize,
    size: (usize, usize),
    seed: u64,
) -> Result<(Vec<Image>, Vec<Mask>)> {
    if n == 0 {
        return Err(Error::arg("synthetic dataset needs n >= 1"));
    }
    let (h, w) = size;
    if h < 8 || w < 8 {
        return Err(Error::arg("synthetic images must be at least 8x8"));
    }
    let mut images = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    for i in 0..n {
        let (img, mask) = synthetic_sample(i, h, w, seed);
        images.push(img);
        masks.push(mask);
    }
    Ok((images, masks))
}

pub fn synthetic_id(index: usize) -> String {
    format!("synth_{index:04}")
}

fn synthetic_sample(index: usize, h: usize, w: usize, seed: u64) -> (Image, Mask) {
    let mut rng = rng::stream(seed, &[domain::SYNTHETIC, index as u64]);
    let side = h.min(w) as f64;
    let a = rng::uniform(&mut rng, SEMI_AXIS_MIN, SEMI_AXIS_MAX) * side;
    let b = rng::uniform(&mut rng, SEMI_AXIS_MIN, SEMI_AXIS_MAX) * side;
    let theta = rng::uniform(&mut rng, 0.0, core::f64::consts::PI);
    let reach = a.max(b);
    let cy = rng::uniform(&mut rng, reach, h as f64 - reach);
    let cx = rng::uniform(&mut rng, reach, w as f64 - reach);
    let (sin_t, cos_t) = (libm::sin(theta), libm::cos(theta));

    let id = synthetic_id(index);
    let mut mask = Mask::empty(id.clone(), h, w);
    let mut plane = vec![SYNTH_BACKGROUND; h * w];
    for y in 0..h {
        for x in 0..w {
            let dy = y as f64 + 0.5 - cy;
            let dx = x as f64 + 0.5 - cx;
            let u = dx * cos_t + dy * sin_t;
            let v = -dx * sin_t + dy * cos_t;
            if (u / a) * (u / a) + (v / b) * (v / b) <= 1.0 {
                mask.set(y, x, true);
                plane[y * w + x] = SYNTH_LESION;
            }
        }
    }
    for p in &mut plane {
        let noise = rng::standard_normal(&mut rng);
        *p = (*p * (1.0 + SYNTH_SPECKLE * noise)).clamp(0.0, 1.0);
    }
    let blurred = gaussian_blur(&plane, h, w, SYNTH_BLUR_SIGMA);
    let img = Image::from_gray(id, h, w, &blurred).expect("blurred plane stays in [0, 1]");
    (img, mask)
}

/// Separable Gaussian blur with edge clamping; kernel radius `ceil(3 sigma)`.
pub fn gaussian_blur(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let radius = libm::ceil(3.0 * sigma) as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| libm::exp(-((i * i) as f64) / (2.0 * sigma * sigma)))
        .collect();
    let total: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= total;
    }
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * plane[y * w + clamp(x as isize + k as isize - radius, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * tmp[clamp(y as isize + k as isize - radius, h) * w + x])
                .sum::<f64>()
                .clamp(0.0, 1.0);
        }
    }
    out
}

/// Assigns splits to `n` consecutive samples in 70/10/20 proportions.
pub fn default_split(index: usize, n: usize) -> Split {
    let train = (n * 7) / 10;
    let val = n / 10;
    if index < train {
        Split::Train
    } else if index < train + val {
        Split::Val
    } else {
        Split::Test
    }
}
