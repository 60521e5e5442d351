//! Datasets: CIFAR-10 binary batches and a seeded synthetic blob set.

use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TrainError};
use crate::tensor::Tensor;

pub const CIFAR_RECORD: usize = 3073;
pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];
pub const CIFAR_TRAIN_FILES: [&str; 5] =
    ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";
/// Overrides `data.path` for CIFAR-10 runs.
pub const CIFAR_DIR_ENV: &str = "ZEBRA_CIFAR10_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Cifar10,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub dataset: DatasetKind,
    /// Directory of CIFAR-10 `.bin` batches.
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default = "default_train")]
    pub train_size: usize,
    #[serde(default = "default_test")]
    pub test_size: usize,
    /// Side length fed to the network; CIFAR-10 images are 2×2-averaged to 16.
    #[serde(default = "default_size")]
    pub image_size: usize,
    #[serde(default = "default_subset_seed")]
    pub subset_seed: u64,
    #[serde(default = "default_mean")]
    pub mean: [f32; 3],
    #[serde(default = "default_std")]
    pub std: [f32; 3],
    /// Synthetic only.
    #[serde(default = "default_classes")]
    pub classes: usize,
}

fn default_train() -> usize {
    5000
}
fn default_test() -> usize {
    1000
}
fn default_size() -> usize {
    16
}
fn default_subset_seed() -> u64 {
    7
}
fn default_mean() -> [f32; 3] {
    CIFAR_MEAN
}
fn default_std() -> [f32; 3] {
    CIFAR_STD
}
fn default_classes() -> usize {
    10
}

impl DataConfig {
    pub fn synthetic(train_size: usize, test_size: usize, image_size: usize) -> Self {
        Self {
            dataset: DatasetKind::Synthetic,
            path: None,
            train_size,
            test_size,
            image_size,
            subset_seed: default_subset_seed(),
            mean: default_mean(),
            std: default_std(),
            classes: default_classes(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_size == 0 || self.test_size == 0 {
            return Err(TrainError::Config("data: train_size and test_size must be >= 1".into()));
        }
        if self.image_size == 0 || !(2..=256).contains(&self.classes) {
            return Err(TrainError::Config("data: image_size must be >= 1 and classes in 2..=256".into()));
        }
        if self.dataset == DatasetKind::Cifar10 && !matches!(self.image_size, 16 | 32) {
            return Err(TrainError::Config("data: CIFAR-10 image_size must be 16 or 32".into()));
        }
        if self.std.iter().any(|&s| s <= 0.0) {
            return Err(TrainError::Config("data: std entries must be positive".into()));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        match self.dataset {
            DatasetKind::Cifar10 => 10,
            DatasetKind::Synthetic => self.classes,
        }
    }

    /// Directory to read CIFAR-10 from: the environment override, else `path`.
    pub fn cifar_dir(&self) -> Option<PathBuf> {
        std::env::var_os(CIFAR_DIR_ENV).map(PathBuf::from).or_else(|| self.path.clone())
    }
}

/// Images `[N, 3, S, S]` with labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<u8>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<u8>) {
        let len = self.images.sample_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            data.extend_from_slice(self.images.sample(i));
        }
        let t = Tensor::from_vec(indices.len(), self.images.c, self.images.h, self.images.w, data);
        (t, indices.iter().map(|&i| self.labels[i]).collect())
    }
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
    /// Human-readable origin, e.g. `cifar10:/data/cifar` or `synthetic`.
    pub source: String,
}

/// Raw CIFAR-10 records: labels and channel-planar RGB bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct CifarRecords {
    pub labels: Vec<u8>,
    pub pixels: Vec<u8>,
}

impl CifarRecords {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Parses one binary batch held in memory.
pub fn parse_cifar10_batch(bytes: &[u8], path: &Path) -> Result<CifarRecords> {
    let data_err = |offset: usize, message: String| TrainError::Data { path: path.to_path_buf(), offset: offset as u64, message };
    if bytes.is_empty() {
        return Err(data_err(0, "empty batch file".into()));
    }
    let full = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
    if full != bytes.len() {
        return Err(data_err(
            full,
            format!("truncated record: {} of {CIFAR_RECORD} bytes", bytes.len() - full),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(data_err(i * CIFAR_RECORD, format!("label {} out of range 0..=9", rec[0])));
        }
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok(CifarRecords { labels, pixels })
}

pub fn read_cifar10_batch(path: &Path) -> Result<CifarRecords> {
    let bytes = std::fs::read(path).map_err(|e| TrainError::io(path, e))?;
    parse_cifar10_batch(&bytes, path)
}

/// Loads the five training batches (`train = true`) or the test batch.
pub fn ingest_cifar10(dir: &Path, train: bool) -> Result<CifarRecords> {
    if !dir.is_dir() {
        return Err(TrainError::Dataset(format!("{} is not a directory", dir.display())));
    }
    let files: Vec<&str> = if train { CIFAR_TRAIN_FILES.to_vec() } else { vec![CIFAR_TEST_FILE] };
    let mut all = CifarRecords { labels: Vec::new(), pixels: Vec::new() };
    for f in files {
        let path = dir.join(f);
        if !path.exists() {
            return Err(TrainError::Dataset(format!("missing CIFAR-10 batch {}", path.display())));
        }
        let r = read_cifar10_batch(&path)?;
        all.labels.extend(r.labels);
        all.pixels.extend(r.pixels);
    }
    Ok(all)
}

/// `k` distinct indices out of `n`, sorted, determined by `seed`.
pub fn subset_indices(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, n, k.min(n)).into_vec();
    idx.sort_unstable();
    idx
}

/// Normalizes (and optionally 2×2-downsamples) the selected records.
pub fn cifar_to_dataset(records: &CifarRecords, indices: &[usize], cfg: &DataConfig) -> Dataset {
    let factor = CIFAR_SIDE / cfg.image_size;
    let s = cfg.image_size;
    let mut data = Vec::with_capacity(indices.len() * 3 * s * s);
    for &i in indices {
        let img = &records.pixels[i * 3072..(i + 1) * 3072];
        for c in 0..3 {
            let plane = &img[c * 1024..(c + 1) * 1024];
            for y in 0..s {
                for x in 0..s {
                    let mut sum = 0u32;
                    for dy in 0..factor {
                        for dx in 0..factor {
                            sum += plane[(y * factor + dy) * CIFAR_SIDE + x * factor + dx] as u32;
                        }
                    }
                    let v = sum as f32 / (255.0 * (factor * factor) as f32);
                    data.push((v - cfg.mean[c]) / cfg.std[c]);
                }
            }
        }
    }
    Dataset {
        images: Tensor::from_vec(indices.len(), 3, s, s, data),
        labels: indices.iter().map(|&i| records.labels[i]).collect(),
        classes: 10,
    }
}

/// Seeded Gaussian blobs on an exactly-zero background. Each class has its
/// own blob position and colour; amplitude, jitter and in-blob noise vary
/// per image.
pub fn synthetic_blobs(n: usize, size: usize, classes: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0f32, 0.1).expect("valid std");
    let sigma = (size as f32 / 8.0).max(0.75);
    let radius = size as f32 / 4.0;
    let mut data = Vec::with_capacity(n * 3 * size * size);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let k = rng.gen_range(0..classes);
        let angle = std::f32::consts::TAU * k as f32 / classes as f32;
        let cy = size as f32 / 2.0 + radius * angle.sin() + rng.gen_range(-1.0..1.0);
        let cx = size as f32 / 2.0 + radius * angle.cos() + rng.gen_range(-1.0..1.0);
        let amp = rng.gen_range(0.7f32..1.3);
        let colour: Vec<f32> =
            (0..3).map(|c| 0.5 + 0.5 * (angle * 2.0 + std::f32::consts::TAU * c as f32 / 3.0).cos()).collect();
        for &col in &colour {
            for y in 0..size {
                for x in 0..size {
                    let d2 = (y as f32 + 0.5 - cy).powi(2) + (x as f32 + 0.5 - cx).powi(2);
                    let env = (-d2 / (2.0 * sigma * sigma)).exp();
                    let v = if env < 0.05 { 0.0 } else { env * (amp * col + noise.sample(&mut rng)) };
                    data.push(v.max(0.0));
                }
            }
        }
        labels.push(k as u8);
    }
    Dataset { images: Tensor::from_vec(n, 3, size, size, data), labels, classes }
}

/// Loads train/test splits as configured. CIFAR-10 without a reachable
/// directory is an error; callers that want a fallback check
/// [`DataConfig::cifar_dir`] first.
pub fn load(cfg: &DataConfig) -> Result<Splits> {
    cfg.validate()?;
    match cfg.dataset {
        DatasetKind::Synthetic => Ok(Splits {
            train: synthetic_blobs(cfg.train_size, cfg.image_size, cfg.classes, cfg.subset_seed),
            test: synthetic_blobs(cfg.test_size, cfg.image_size, cfg.classes, cfg.subset_seed.wrapping_add(1)),
            source: "synthetic".into(),
        }),
        DatasetKind::Cifar10 => {
            let dir = cfg
                .cifar_dir()
                .ok_or_else(|| TrainError::Dataset(format!("no CIFAR-10 directory: set data.path or {CIFAR_DIR_ENV}")))?;
            let train = ingest_cifar10(&dir, true)?;
            let test = ingest_cifar10(&dir, false)?;
            let tr = subset_indices(train.len(), cfg.train_size, cfg.subset_seed);
            let te = subset_indices(test.len(), cfg.test_size, cfg.subset_seed.wrapping_add(1));
            Ok(Splits {
                train: cifar_to_dataset(&train, &tr, cfg),
                test: cifar_to_dataset(&test, &te, cfg),
                source: format!("cifar10:{}", dir.display()),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subset_is_seeded() {
        let a = subset_indices(50_000, 1000, 7);
        assert_eq!(a, subset_indices(50_000, 1000, 7));
        assert_eq!(a.len(), 1000);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_ne!(a, subset_indices(50_000, 1000, 8));
    }

    #[test]
    fn synthetic_background_is_exactly_zero() {
        let d = synthetic_blobs(20, 16, 10, 3);
        let zeros = d.images.data.iter().filter(|&&v| v == 0.0).count();
        assert!(zeros as f64 / d.images.data.len() as f64 > 0.5);
        assert!(d.images.data.iter().all(|&v| v >= 0.0));
        assert_eq!(d, synthetic_blobs(20, 16, 10, 3));
    }

    #[test]
    fn downsample_averages_two_by_two() {
        let mut pixels = vec![0u8; 3072];
        pixels[0] = 255;
        pixels[1] = 255;
        let records = CifarRecords { labels: vec![3], pixels };
        let cfg = DataConfig { mean: [0.0; 3], std: [1.0; 3], ..DataConfig::synthetic(1, 1, 16) };
        let d = cifar_to_dataset(&records, &[0], &cfg);
        assert_eq!(d.images.shape(), [1, 3, 16, 16]);
        assert!((d.images.data[0] - 0.5).abs() < 1e-6);
        assert_eq!(d.labels, vec![3]);
    }
}
