//! Image datasets: CIFAR-10 binary ingestion, labeled-subset sampling,
//! deterministic batching and small synthetic fixtures.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{splitmix64, SeededRng};
use crate::tensor::{Element, Tensor};

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CHANNELS: usize = 3;
pub const CIFAR_PIXELS: usize = CIFAR_CHANNELS * CIFAR_SIDE * CIFAR_SIDE;
/// One label byte followed by 1024 R, 1024 G and 1024 B bytes.
pub const CIFAR_RECORD: usize = 1 + CIFAR_PIXELS;
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing data file {}", .0.display())]
    MissingFile(PathBuf),
    #[error("{}: size {len} is not a multiple of {record}-byte records", path.display())]
    BadSize { path: PathBuf, len: usize, record: usize },
    #[error("{}: record {record} has label {label} (expected 0..=9)", path.display())]
    BadLabel { path: PathBuf, record: usize, label: u8 },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset {0} has no labels")]
    Unlabeled(String),
    #[error("class {class} has only {available} examples, {requested} requested")]
    ClassExhausted {
        class: u8,
        available: usize,
        requested: usize,
    },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Images `N × C × H × W` with values in `[0, 1]`, plus optional labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor<f32>,
    labels: Option<Vec<u8>>,
    pub split: Split,
    pub source: String,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Option<Vec<u8>>, split: Split, source: impl Into<String>) -> Result<Self, DataError> {
        if images.rank() != 4 {
            return Err(DataError::Invalid(format!("images must be NCHW, got {:?}", images.shape())));
        }
        if let Some(l) = &labels {
            if l.len() != images.shape()[0] {
                return Err(DataError::Invalid(format!(
                    "{} labels for {} images",
                    l.len(),
                    images.shape()[0]
                )));
            }
        }
        if let Some(i) = images.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(DataError::Invalid(format!("pixel {i} = {} outside [0, 1]", images.data()[i])));
        }
        Ok(Dataset {
            images,
            labels,
            split,
            source: source.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `[C, H, W]` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn pixels_per_image(&self) -> usize {
        self.image_shape().iter().product()
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let p = self.pixels_per_image();
        &self.images.data()[i * p..(i + 1) * p]
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn without_labels(&self) -> Dataset {
        Dataset {
            labels: None,
            ..self.clone()
        }
    }

    pub fn with_labels(&self, labels: Vec<u8>) -> Result<Dataset, DataError> {
        Dataset::new(self.images.clone(), Some(labels), self.split, self.source.clone())
    }

    /// Examples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let p = self.pixels_per_image();
        let mut data = Vec::with_capacity(indices.len() * p);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let [c, h, w] = self.image_shape();
        Dataset {
            images: Tensor::new(&[indices.len(), c, h, w], data).expect("non-empty subset"),
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
            split: self.split,
            source: format!("{}[subset {}]", self.source, indices.len()),
        }
    }

    /// The first `n` examples (all of them if `n >= len`).
    pub fn take(&self, n: usize) -> Dataset {
        if n >= self.len() {
            return self.clone();
        }
        let idx: Vec<usize> = (0..n).collect();
        let mut d = self.subset(&idx);
        d.source = format!("{}[..{n}]", self.source);
        d
    }

    /// Stacks the images at `indices` into a `[B, C, H, W]` tensor.
    pub fn batch_tensor<T: Element>(&self, indices: &[usize]) -> Tensor<T> {
        let p = self.pixels_per_image();
        let mut data = Vec::with_capacity(indices.len() * p);
        for &i in indices {
            data.extend(self.image(i).iter().map(|&v| T::from_f64_lossy(v as f64)));
        }
        let [c, h, w] = self.image_shape();
        Tensor::new(&[indices.len(), c, h, w], data).expect("non-empty batch")
    }

    /// Example count per label, ascending by label.
    pub fn class_counts(&self) -> Option<BTreeMap<u8, usize>> {
        let labels = self.labels.as_ref()?;
        let mut counts = BTreeMap::new();
        for &l in labels {
            *counts.entry(l).or_insert(0) += 1;
        }
        Some(counts)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            DataError::MissingFile(path.to_path_buf())
        } else {
            DataError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    })
}

/// Parses CIFAR-10 binary records; pixels become `byte / 255`.
pub fn parse_cifar_records(bytes: &[u8], path: &Path) -> Result<(Vec<f32>, Vec<u8>), DataError> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(DataError::BadSize {
            path: path.to_path_buf(),
            len: bytes.len(),
            record: CIFAR_RECORD,
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut pixels = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for (record, chunk) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = chunk[0];
        if label > 9 {
            return Err(DataError::BadLabel {
                path: path.to_path_buf(),
                record,
                label,
            });
        }
        labels.push(label);
        pixels.extend(chunk[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok((pixels, labels))
}

/// Inverse of [`parse_cifar_records`] for images whose pixels are multiples of 1/255.
pub fn encode_cifar_records(ds: &Dataset) -> Result<Vec<u8>, DataError> {
    if ds.image_shape() != [CIFAR_CHANNELS, CIFAR_SIDE, CIFAR_SIDE] {
        return Err(DataError::Invalid(format!("not a CIFAR image shape: {:?}", ds.image_shape())));
    }
    let labels = ds.labels().ok_or_else(|| DataError::Unlabeled(ds.source.clone()))?;
    let mut out = Vec::with_capacity(ds.len() * CIFAR_RECORD);
    for (i, &label) in labels.iter().enumerate() {
        out.push(label);
        out.extend(ds.image(i).iter().map(|&v| (v * 255.0).round() as u8));
    }
    Ok(out)
}

fn load_files(dir: &Path, files: &[&str], split: Split) -> Result<Dataset, DataError> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for name in files {
        let path = dir.join(name);
        let bytes = read_file(&path)?;
        let (p, l) = parse_cifar_records(&bytes, &path)?;
        pixels.extend(p);
        labels.extend(l);
    }
    let n = labels.len();
    let images = Tensor::new(&[n, CIFAR_CHANNELS, CIFAR_SIDE, CIFAR_SIDE], pixels)
        .map_err(|e| DataError::Invalid(e.to_string()))?;
    Dataset::new(images, Some(labels), split, format!("cifar10:{}:{split}", dir.display()))
}

/// Loads the five training batches and the test batch from `dir`.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset), DataError> {
    if !dir.is_dir() {
        return Err(DataError::MissingFile(dir.to_path_buf()));
    }
    let train = load_files(dir, &CIFAR_TRAIN_FILES, Split::Train)?;
    let test = load_files(dir, &[CIFAR_TEST_FILE], Split::Test)?;
    Ok((train, test))
}

/// Stratified sample: exactly `n_per_class` indices for every label present.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledSubset {
    /// Sorted ascending, unique.
    pub indices: Vec<usize>,
    pub n_per_class: usize,
    pub seed: u64,
}

pub fn sample_labeled_subset(ds: &Dataset, n_per_class: usize, seed: u64) -> Result<LabeledSubset, DataError> {
    let labels = ds.labels().ok_or_else(|| DataError::Unlabeled(ds.source.clone()))?;
    let mut by_class: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut rng = SeededRng::from_seed(seed);
    let mut indices = Vec::with_capacity(by_class.len() * n_per_class);
    for (class, mut members) in by_class {
        if members.len() < n_per_class {
            return Err(DataError::ClassExhausted {
                class,
                available: members.len(),
                requested: n_per_class,
            });
        }
        members.shuffle(rng.inner_mut());
        indices.extend_from_slice(&members[..n_per_class]);
    }
    indices.sort_unstable();
    Ok(LabeledSubset {
        indices,
        n_per_class,
        seed,
    })
}

/// Per-epoch shuffled batching, a pure function of `(seed, epoch)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub seed: u64,
    pub drop_last: bool,
}

impl BatchPlan {
    pub fn new(batch_size: usize, seed: u64) -> Self {
        assert!(batch_size >= 1, "batch size must be at least 1");
        BatchPlan {
            batch_size,
            seed,
            drop_last: false,
        }
    }

    pub fn permutation(&self, n: usize, epoch: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng = SeededRng::from_seed(splitmix64(self.seed ^ splitmix64(epoch)));
        idx.shuffle(rng.inner_mut());
        idx
    }

    pub fn index_batches(&self, n: usize, epoch: u64) -> Vec<Vec<usize>> {
        let perm = self.permutation(n, epoch);
        perm.chunks(self.batch_size)
            .filter(|c| !self.drop_last || c.len() == self.batch_size)
            .map(|c| c.to_vec())
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Batch<T: Element> {
    pub indices: Vec<usize>,
    pub images: Tensor<T>,
    pub labels: Option<Vec<usize>>,
}

/// Materializes batch tensors lazily, in plan order.
pub fn batches<'a, T: Element>(ds: &'a Dataset, plan: &BatchPlan, epoch: u64) -> impl Iterator<Item = Batch<T>> + 'a {
    plan.index_batches(ds.len(), epoch).into_iter().map(move |indices| Batch {
        images: ds.batch_tensor(&indices),
        labels: ds.labels().map(|l| indices.iter().map(|&i| l[i] as usize).collect()),
        indices,
    })
}

/// Sequential, unshuffled batches (evaluation order).
pub fn ordered_batches<'a, T: Element>(ds: &'a Dataset, batch_size: usize) -> impl Iterator<Item = Batch<T>> + 'a {
    let n = ds.len();
    (0..n).step_by(batch_size.max(1)).map(move |start| {
        let indices: Vec<usize> = (start..(start + batch_size).min(n)).collect();
        Batch {
            images: ds.batch_tensor(&indices),
            labels: ds.labels().map(|l| indices.iter().map(|&i| l[i] as usize).collect()),
            indices,
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    /// Every pixel 0.5, unlabeled.
    Constant,
    /// Linear intensity ramps with random orientation; labels are the orientation quadrant.
    GradientPatterns,
    /// Two classes of noisy flat images with means 0.3 and 0.7.
    TwoGaussians,
}

/// Deterministic `n × 3 × size × size` images with known structure.
pub fn synth_dataset(kind: SynthKind, n: usize, size: usize, seed: u64) -> Dataset {
    assert!(n >= 1 && size >= 1, "synthetic dataset needs n >= 1 and size >= 1");
    let c = CIFAR_CHANNELS;
    let p = c * size * size;
    let mut rng = SeededRng::stream(seed, "synth");
    let mut data = Vec::with_capacity(n * p);
    let labels = match kind {
        SynthKind::Constant => {
            data.resize(n * p, 0.5);
            None
        }
        SynthKind::GradientPatterns => {
            let mut labels = Vec::with_capacity(n);
            let coord = |i: usize| if size > 1 { 2.0 * i as f64 / (size - 1) as f64 - 1.0 } else { 0.0 };
            for _ in 0..n {
                let theta = std::f64::consts::TAU * rng.uniform();
                let contrast = 0.2 + 0.25 * rng.uniform();
                let offsets: Vec<f64> = (0..c).map(|_| 0.35 + 0.3 * rng.uniform()).collect();
                let (dy, dx) = theta.sin_cos();
                for &off in &offsets {
                    for h in 0..size {
                        for w in 0..size {
                            let v = off + contrast * (dx * coord(w) + dy * coord(h));
                            data.push(v.clamp(0.0, 1.0) as f32);
                        }
                    }
                }
                labels.push(((theta / std::f64::consts::TAU * 4.0) as u8).min(3));
            }
            Some(labels)
        }
        SynthKind::TwoGaussians => {
            let mut labels = Vec::with_capacity(n);
            for i in 0..n {
                let label = (i % 2) as u8;
                let mean = if label == 0 { 0.3 } else { 0.7 };
                for _ in 0..p {
                    data.push((mean + 0.05 * rng.normal()).clamp(0.0, 1.0) as f32);
                }
                labels.push(label);
            }
            Some(labels)
        }
    };
    let images = Tensor::new(&[n, c, size, size], data).expect("consistent synthetic shape");
    let source = format!("synthetic:{kind:?}:n{n}:s{size}:seed{seed}");
    let ds = Dataset::new(images, labels, Split::Train, source).expect("synthetic pixels in [0, 1]");
    if kind == SynthKind::TwoGaussians {
        let acc = mean_intensity_threshold_accuracy(&ds, 0.5);
        assert!(acc >= 0.99, "two-gaussians construction lost its margin ({acc})");
    }
    ds
}

/// Accuracy of "label 1 iff mean intensity > threshold".
pub fn mean_intensity_threshold_accuracy(ds: &Dataset, threshold: f64) -> f64 {
    let Some(labels) = ds.labels() else {
        return 0.0;
    };
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| {
            let img = ds.image(i);
            let mean = img.iter().map(|&v| v as f64).sum::<f64>() / img.len() as f64;
            (mean > threshold) == (l == 1)
        })
        .count();
    correct as f64 / labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_sizes_with_tail() {
        let plan = BatchPlan::new(3, 1);
        let sizes: Vec<usize> = plan.index_batches(10, 0).iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);
        let drop = BatchPlan {
            drop_last: true,
            ..plan
        };
        assert_eq!(drop.index_batches(10, 0).len(), 3);
    }

    #[test]
    fn permutation_depends_on_epoch_only() {
        let plan = BatchPlan::new(4, 9);
        assert_eq!(plan.permutation(50, 0), plan.permutation(50, 0));
        assert_ne!(plan.permutation(50, 0), plan.permutation(50, 1));
    }

    #[test]
    fn parse_rejects_bad_label_and_size() {
        let mut rec = vec![0u8; CIFAR_RECORD];
        rec[0] = 10;
        let p = Path::new("x.bin");
        assert!(matches!(parse_cifar_records(&rec, p), Err(DataError::BadLabel { label: 10, .. })));
        assert!(matches!(
            parse_cifar_records(&rec[..CIFAR_PIXELS], p),
            Err(DataError::BadSize { len: 3072, .. })
        ));
    }

    #[test]
    fn constant_kind() {
        let ds = synth_dataset(SynthKind::Constant, 3, 4, 0);
        assert!(ds.images().data().iter().all(|&v| v == 0.5));
        assert!(ds.labels().is_none());
    }

    #[test]
    fn subset_requires_labels() {
        let ds = synth_dataset(SynthKind::Constant, 3, 4, 0);
        assert!(matches!(sample_labeled_subset(&ds, 1, 0), Err(DataError::Unlabeled(_))));
        let ds = synth_dataset(SynthKind::TwoGaussians, 6, 4, 0);
        assert!(matches!(
            sample_labeled_subset(&ds, 4, 0),
            Err(DataError::ClassExhausted { available: 3, .. })
        ));
    }
}
