use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::idx::{self, ByteGrid};
use crate::error::{Error, Result};

/// Images and labels exactly as stored in the IDX files.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawDataset {
    pub images: Vec<ByteGrid>,
    pub labels: Vec<u8>,
}

impl RawDataset {
    pub fn new(images: Vec<ByteGrid>, labels: Vec<u8>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "RawDataset::new",
                lhs: vec![images.len()],
                rhs: vec![labels.len()],
            });
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l > 9) {
            return Err(Error::LabelOutOfRange { index, label });
        }
        Ok(RawDataset { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn stems(self) -> [&'static str; 2] {
        match self {
            Split::Train => ["train-images", "train-labels"],
            Split::Test => ["t10k-images", "t10k-labels"],
        }
    }
}

fn locate(dir: &Path, stem: &str, kind: &str) -> Result<PathBuf> {
    let candidates = [
        format!("{stem}-{kind}-ubyte"),
        format!("{stem}.{kind}-ubyte"),
        format!("{stem}-{kind}-ubyte.gz"),
        format!("{stem}.{kind}-ubyte.gz"),
    ];
    candidates
        .iter()
        .map(|name| dir.join(name))
        .find(|p| p.is_file())
        .ok_or_else(|| {
            Error::io(
                dir.join(&candidates[0]),
                std::io::Error::new(std::io::ErrorKind::NotFound, "IDX file not found"),
            )
        })
}

/// Loads one MNIST split from `dir`, accepting both the plain and the
/// gzip-compressed distribution file names.
pub fn load_raw(dir: &Path, split: Split) -> Result<RawDataset> {
    let [image_stem, label_stem] = split.stems();
    let image_path = locate(dir, image_stem, "idx3")?;
    let label_path = locate(dir, label_stem, "idx1")?;
    let images = idx::parse_idx_images(&idx::read_maybe_gzip(&image_path)?)?;
    let labels = idx::parse_idx_labels(&idx::read_maybe_gzip(&label_path)?)?;
    RawDataset::new(images, labels)
}

/// Keeps the examples whose label is in `keep`, preserving order.
pub fn filter_digits(raw: &RawDataset, keep: &[u8]) -> Result<RawDataset> {
    if keep.is_empty() {
        return Err(Error::EmptyInput("digit set"));
    }
    let (images, labels): (Vec<_>, Vec<_>) = raw
        .images
        .iter()
        .zip(&raw.labels)
        .filter(|(_, label)| keep.contains(label))
        .map(|(img, &label)| (img.clone(), label))
        .unzip();
    if labels.is_empty() {
        return Err(Error::EmptyResult {
            keep: keep.to_vec(),
        });
    }
    Ok(RawDataset { images, labels })
}

/// Affine pixel normalization `(pixel / 255 - shift) / scale`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub shift: f64,
    pub scale: f64,
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            shift: 0.1307,
            scale: 0.3081,
        }
    }
}

impl Normalization {
    pub fn apply(&self, pixel: u8) -> f32 {
        ((pixel as f64 / 255.0 - self.shift) / self.scale) as f32
    }

    /// Maps a normalized value back to an 8-bit gray level, clamping.
    pub fn invert(&self, value: f32) -> u8 {
        let unit = value as f64 * self.scale + self.shift;
        (unit * 255.0).round().clamp(0.0, 255.0) as u8
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    /// Global mean over every pixel of every example.
    pub mean: f64,
    /// Mean over examples at each pixel position, row-major.
    pub per_pixel_mean: Vec<f64>,
}

/// A borrowed view of one normalized example.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub pixels: &'a [f32],
    pub label: u8,
}

/// Normalized examples stored contiguously, one `rows * cols` block each.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub rows: usize,
    pub cols: usize,
    pixels: Vec<f32>,
    labels: Vec<u8>,
    pub stats: DatasetStats,
}

impl Dataset {
    pub fn from_parts(rows: usize, cols: usize, pixels: Vec<f32>, labels: Vec<u8>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyInput("dataset"));
        }
        if pixels.len() != labels.len() * rows * cols {
            return Err(Error::ShapeMismatch {
                op: "Dataset::from_parts",
                lhs: vec![pixels.len()],
                rhs: vec![labels.len(), rows, cols],
            });
        }
        let stats = compute_stats(&pixels, rows * cols);
        Ok(Dataset {
            rows,
            cols,
            pixels,
            labels,
            stats,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn example(&self, i: usize) -> Example<'_> {
        let n = self.feature_count();
        Example {
            pixels: &self.pixels[i * n..(i + 1) * n],
            label: self.labels[i],
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = Example<'_>> + '_ {
        (0..self.len()).map(|i| self.example(i))
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    /// Replaces the statistics, e.g. to give a test split the training
    /// split's mean.
    pub fn with_stats(mut self, stats: DatasetStats) -> Self {
        self.stats = stats;
        self
    }

    /// Keeps the first `n` examples.
    pub fn truncate(mut self, n: usize) -> Self {
        let n = n.max(1).min(self.len());
        self.labels.truncate(n);
        self.pixels.truncate(n * self.feature_count());
        self
    }
}

fn compute_stats(pixels: &[f32], features: usize) -> DatasetStats {
    let count = pixels.len() / features;
    let mut per_pixel = vec![0.0f64; features];
    for example in pixels.chunks_exact(features) {
        for (acc, &v) in per_pixel.iter_mut().zip(example) {
            *acc += v as f64;
        }
    }
    for acc in &mut per_pixel {
        *acc /= count as f64;
    }
    let mean = pixels.iter().map(|&v| v as f64).sum::<f64>() / pixels.len() as f64;
    DatasetStats {
        mean,
        per_pixel_mean: per_pixel,
    }
}

pub fn normalize(raw: &RawDataset, norm: Normalization) -> Result<Dataset> {
    if norm.scale.is_nan() || norm.scale <= 0.0 {
        return Err(Error::Config(format!(
            "normalization scale must be positive, got {}",
            norm.scale
        )));
    }
    let first = raw.images.first().ok_or(Error::EmptyInput("dataset"))?;
    let (rows, cols) = (first.rows, first.cols);
    let mut pixels = Vec::with_capacity(raw.len() * rows * cols);
    for grid in &raw.images {
        if (grid.rows, grid.cols) != (rows, cols) {
            return Err(Error::ShapeMismatch {
                op: "normalize",
                lhs: vec![rows, cols],
                rhs: vec![grid.rows, grid.cols],
            });
        }
        pixels.extend(grid.pixels.iter().map(|&p| norm.apply(p)));
    }
    Dataset::from_parts(rows, cols, pixels, raw.labels.clone())
}

pub fn dataset_stats(ds: &Dataset) -> DatasetStats {
    compute_stats(&ds.pixels, ds.feature_count())
}

/// Training and test splits filtered to `digits`, both carrying the
/// training split's statistics.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

pub fn load_splits(dir: &Path, digits: &[u8], norm: Normalization) -> Result<Splits> {
    let train = normalize(&filter_digits(&load_raw(dir, Split::Train)?, digits)?, norm)?;
    let test = normalize(&filter_digits(&load_raw(dir, Split::Test)?, digits)?, norm)?
        .with_stats(train.stats.clone());
    Ok(Splits { train, test })
}
