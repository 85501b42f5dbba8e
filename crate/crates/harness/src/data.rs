//! Datasets: CIFAR-10 binary batches and a synthetic Gaussian mixture.

use std::path::Path;

use bma_core::nn::InputShape;
use bma_core::rng::rng_from_seed;
use bma_core::{BmaError, Result};
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::DatasetSpec;

pub const CIFAR10_RECORD: usize = 3073;
pub const CIFAR10_CLASSES: usize = 10;
const CIFAR10_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const CIFAR10_TEST_FILE: &str = "test_batch.bin";

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// One row per example; images are channel-major, row-major.
    pub inputs: Array2<f32>,
    pub labels: Vec<usize>,
    pub shape: InputShape,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            inputs: self.inputs.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            shape: self.shape,
            classes: self.classes,
        }
    }
}

/// Parses CIFAR-10 binary records: one label byte, then 3×32×32 pixel
/// bytes. Pixels are scaled to [0, 1].
pub fn parse_cifar10(bytes: &[u8]) -> Result<Dataset> {
    if !bytes.len().is_multiple_of(CIFAR10_RECORD) {
        return Err(BmaError::Format(format!(
            "CIFAR-10 data of {} bytes is not a whole number of {CIFAR10_RECORD}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR10_RECORD;
    let mut inputs = Array2::<f32>::zeros((n, CIFAR10_RECORD - 1));
    let mut labels = Vec::with_capacity(n);
    for (i, (record, mut row)) in bytes.chunks_exact(CIFAR10_RECORD).zip(inputs.outer_iter_mut()).enumerate() {
        let label = record[0] as usize;
        if label >= CIFAR10_CLASSES {
            return Err(BmaError::Format(format!("record {i} has label byte {label}")));
        }
        labels.push(label);
        for (x, &b) in row.iter_mut().zip(&record[1..]) {
            *x = b as f32 / 255.0;
        }
    }
    Ok(Dataset {
        inputs,
        labels,
        shape: InputShape::image(3, 32, 32),
        classes: CIFAR10_CLASSES,
    })
}

pub fn read_cifar10_file(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    parse_cifar10(&bytes).map_err(|e| match e {
        BmaError::Format(m) => BmaError::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn concat(parts: Vec<Dataset>) -> Result<Dataset> {
    let first = parts.first().ok_or_else(|| BmaError::Validation("no data files".into()))?;
    let (shape, classes) = (first.shape, first.classes);
    let views: Vec<_> = parts.iter().map(|d| d.inputs.view()).collect();
    let inputs = ndarray::concatenate(Axis(0), &views).map_err(|e| BmaError::Dimension(e.to_string()))?;
    let labels = parts.iter().flat_map(|d| d.labels.iter().copied()).collect();
    Ok(Dataset {
        inputs,
        labels,
        shape,
        classes,
    })
}

/// The five training batches and the test batch of a CIFAR-10 binary
/// directory, unstandardized.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = CIFAR10_TRAIN_FILES
        .iter()
        .map(|f| read_cifar10_file(&dir.join(f)))
        .collect::<Result<Vec<_>>>()?;
    let test = read_cifar10_file(&dir.join(CIFAR10_TEST_FILE))?;
    Ok((concat(train)?, test))
}

/// Deterministic shuffled split into `(train, rest)` index lists.
pub fn split(n: usize, train_frac: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(BmaError::Validation(format!("train_frac must lie in (0, 1), got {train_frac}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_from_seed(seed));
    let cut = (n as f64 * train_frac).round() as usize;
    let rest = idx.split_off(cut.min(n));
    Ok((idx, rest))
}

/// Per-channel mean and standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Standardizer {
    pub fn fit(data: &Dataset) -> Self {
        let c = data.shape.channels;
        let plane = data.shape.height * data.shape.width;
        let mut mean = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for row in data.inputs.outer_iter() {
            for ch in 0..c {
                for &v in row.slice(ndarray::s![ch * plane..(ch + 1) * plane]) {
                    mean[ch] += v as f64;
                    sq[ch] += (v as f64) * (v as f64);
                }
            }
        }
        let count = (data.len() * plane).max(1) as f64;
        let mean: Vec<f64> = mean.iter().map(|m| m / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let v = (s / count - m * m).max(0.0).sqrt();
                if v > 1e-8 {
                    v as f32
                } else {
                    1.0
                }
            })
            .collect();
        Self {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            std,
        }
    }

    pub fn apply(&self, data: &mut Dataset) {
        let plane = data.shape.height * data.shape.width;
        for mut row in data.inputs.outer_iter_mut() {
            for (ch, (m, s)) in self.mean.iter().zip(&self.std).enumerate() {
                row.slice_mut(ndarray::s![ch * plane..(ch + 1) * plane])
                    .mapv_inplace(|v| (v - m) / s);
            }
        }
    }
}

/// Parameters of the synthetic Gaussian-mixture classification task.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixtureSpec {
    pub classes: usize,
    /// Blobs per class. Blobs sit evenly on a circle in the first two
    /// coordinates with classes interleaved, so more than one blob per class
    /// gives a nonlinear decision boundary.
    pub blobs: usize,
    pub dim: usize,
    pub radius: f64,
    pub noise: f64,
}

pub fn synthetic_mixture(n: usize, spec: &MixtureSpec, seed: u64) -> Dataset {
    let MixtureSpec {
        classes,
        blobs,
        dim,
        radius,
        noise,
    } = *spec;
    let mut rng = rng_from_seed(seed);
    let mut inputs = Array2::<f32>::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    for mut row in inputs.outer_iter_mut() {
        let y = rng.random_range(0..classes);
        let b = rng.random_range(0..blobs.max(1));
        let angle = 2.0 * std::f64::consts::PI * (b * classes + y) as f64 / (classes * blobs.max(1)) as f64;
        for (j, x) in row.iter_mut().enumerate() {
            let center = match j {
                0 => radius * angle.cos(),
                1 => radius * angle.sin(),
                _ => 0.0,
            };
            let e: f64 = rng.sample(StandardNormal);
            *x = (center + noise * e) as f32;
        }
        labels.push(y);
    }
    Dataset {
        inputs,
        labels,
        shape: InputShape::flat(dim),
        classes,
    }
}

/// Standardized training, validation and test sets.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Loads or generates the configured dataset, splits off validation data
/// and standardizes every split with training statistics.
pub fn prepare(spec: &DatasetSpec, train_frac: f64, seed: u64) -> Result<Splits> {
    use bma_core::rng::derive_seed;
    let (pool, test) = match spec {
        DatasetSpec::Cifar10 {
            dir,
            train_subset,
            test_subset,
        } => {
            let (mut pool, mut test) = load_cifar10(dir)?;
            if let Some(k) = *train_subset {
                pool = subset(&pool, k, derive_seed(seed, &[1]))?;
            }
            if let Some(k) = *test_subset {
                test = subset(&test, k, derive_seed(seed, &[2]))?;
            }
            (pool, test)
        }
        DatasetSpec::Synthetic {
            classes,
            blobs,
            dim,
            pool,
            test,
            radius,
            noise,
        } => {
            let m = MixtureSpec {
                classes: *classes,
                blobs: *blobs,
                dim: *dim,
                radius: *radius,
                noise: *noise,
            };
            (
                synthetic_mixture(*pool, &m, derive_seed(seed, &[3])),
                synthetic_mixture(*test, &m, derive_seed(seed, &[4])),
            )
        }
    };
    let (tr, va) = split(pool.len(), train_frac, derive_seed(seed, &[5]))?;
    let (mut train, mut val, mut test) = (pool.select(&tr), pool.select(&va), test);
    if train.is_empty() || val.is_empty() || test.is_empty() {
        return Err(BmaError::Validation("train, validation and test splits must be nonempty".into()));
    }
    let z = Standardizer::fit(&train);
    z.apply(&mut train);
    z.apply(&mut val);
    z.apply(&mut test);
    Ok(Splits { train, val, test })
}

fn subset(data: &Dataset, k: usize, seed: u64) -> Result<Dataset> {
    if k == 0 || k > data.len() {
        return Err(BmaError::Validation(format!("cannot take {k} of {} examples", data.len())));
    }
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut rng_from_seed(seed));
    idx.truncate(k);
    idx.sort_unstable();
    Ok(data.select(&idx))
}
