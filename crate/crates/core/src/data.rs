//! Datasets, standard binary loaders and a seeded synthetic generator.
//!
//! Image loaders keep raw pixel bytes and scale them by 1/255 on access, so
//! a pooled CIFAR corpus costs one byte per feature in memory.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::scalar::Scalar;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_PIXELS: usize = 3072;
/// Isotropic standard deviation of the synthetic blobs.
pub const SYNTHETIC_SIGMA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetName {
    Cifar10,
    Cifar100,
    Fmnist,
    Synthetic,
}

impl DatasetName {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Cifar10 => "cifar10",
            Self::Cifar100 => "cifar100",
            Self::Fmnist => "fmnist",
            Self::Synthetic => "synthetic",
        }
    }
}

impl fmt::Display for DatasetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cifar10" => Ok(Self::Cifar10),
            "cifar100" => Ok(Self::Cifar100),
            "fmnist" => Ok(Self::Fmnist),
            "synthetic" => Ok(Self::Synthetic),
            other => Err(Error::InvalidDataset(format!("unknown dataset {other:?}"))),
        }
    }
}

/// Backing store for feature rows.
#[derive(Debug, Clone, PartialEq)]
pub enum Features<T: Scalar> {
    /// Raw bytes; feature value is `byte / 255`.
    Pixels(Vec<u8>),
    Dense(Vec<T>),
}

/// Read-only view over labelled samples, consumed by the models.
pub trait Batch<T: Scalar> {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn feature_dim(&self) -> usize;

    fn label(&self, i: usize) -> usize;

    /// Feature row `i`. Dense stores hand out a borrowed slice; pixel stores
    /// decode into `scratch`.
    fn features<'a>(&'a self, i: usize, scratch: &'a mut Vec<T>) -> &'a [T];
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T: Scalar = f64> {
    name: DatasetName,
    num_classes: usize,
    feature_dim: usize,
    features: Features<T>,
    labels: Vec<u32>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(
        name: DatasetName,
        num_classes: usize,
        feature_dim: usize,
        features: Features<T>,
        labels: Vec<u32>,
    ) -> Result<Self> {
        if num_classes == 0 || feature_dim == 0 {
            return Err(Error::InvalidDataset("num_classes and feature_dim must be positive".into()));
        }
        let stored = match &features {
            Features::Pixels(b) => b.len(),
            Features::Dense(v) => v.len(),
        };
        if stored != labels.len() * feature_dim {
            return Err(Error::InvalidDataset(format!(
                "{stored} feature values for {} samples of dimension {feature_dim}",
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|l| **l as usize >= num_classes) {
            return Err(Error::InvalidDataset(format!("label {l} >= num_classes {num_classes}")));
        }
        if let Features::Dense(v) = &features {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidDataset("non-finite feature value".into()));
            }
        }
        Ok(Self {
            name,
            num_classes,
            feature_dim,
            features,
            labels,
        })
    }

    pub fn name(&self) -> DatasetName {
        self.name
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn store(&self) -> &Features<T> {
        &self.features
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for l in &self.labels {
            counts[*l as usize] += 1;
        }
        counts
    }

    /// Copies the given samples, in order, into a new dataset.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let d = self.feature_dim;
        if let Some(i) = indices.iter().find(|i| **i >= self.labels.len()) {
            return Err(Error::InvalidDataset(format!("index {i} out of range")));
        }
        let features = match &self.features {
            Features::Pixels(b) => Features::Pixels(indices.iter().flat_map(|i| &b[i * d..(i + 1) * d]).copied().collect()),
            Features::Dense(v) => Features::Dense(indices.iter().flat_map(|i| &v[i * d..(i + 1) * d]).copied().collect()),
        };
        let labels = indices.iter().map(|i| self.labels[*i]).collect();
        Self::new(self.name, self.num_classes, d, features, labels)
    }

    pub fn view<'a>(&'a self, indices: &'a [usize]) -> Select<'a, Self> {
        Select::new(self, indices)
    }
}

impl<T: Scalar> Batch<T> for Dataset<T> {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    fn features<'a>(&'a self, i: usize, scratch: &'a mut Vec<T>) -> &'a [T] {
        let d = self.feature_dim;
        match &self.features {
            Features::Dense(v) => &v[i * d..(i + 1) * d],
            Features::Pixels(b) => {
                let scale = T::from_f64_lossy(255.0);
                scratch.clear();
                scratch.extend(b[i * d..(i + 1) * d].iter().map(|p| T::from_u8(*p).unwrap() / scale));
                scratch
            }
        }
    }
}

/// Index-selected view over any batch.
#[derive(Debug, Clone, Copy)]
pub struct Select<'a, B> {
    inner: &'a B,
    indices: &'a [usize],
}

impl<'a, B> Select<'a, B> {
    pub fn new(inner: &'a B, indices: &'a [usize]) -> Self {
        Self { inner, indices }
    }
}

impl<T: Scalar, B: Batch<T>> Batch<T> for Select<'_, B> {
    fn len(&self) -> usize {
        self.indices.len()
    }

    fn feature_dim(&self) -> usize {
        self.inner.feature_dim()
    }

    fn label(&self, i: usize) -> usize {
        self.inner.label(self.indices[i])
    }

    fn features<'a>(&'a self, i: usize, scratch: &'a mut Vec<T>) -> &'a [T] {
        self.inner.features(self.indices[i], scratch)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    fs::read(path).at(path)
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("header ends before byte {}", at + 4),
        })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let found = be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    Ok(())
}

/// Reads one IDX image file and its label file (Fashion-MNIST layout).
pub fn load_idx<T: Scalar>(images_path: &Path, labels_path: &Path) -> Result<Dataset<T>> {
    let (pixels, labels, dim) = read_idx_pair(images_path, labels_path)?;
    Dataset::new(DatasetName::Fmnist, 10, dim, Features::Pixels(pixels), labels)
}

fn read_idx_pair(images_path: &Path, labels_path: &Path) -> Result<(Vec<u8>, Vec<u32>, usize)> {
    let images = read_file(images_path)?;
    let labels = read_file(labels_path)?;
    check_magic(&images, IDX_IMAGES_MAGIC, images_path)?;
    check_magic(&labels, IDX_LABELS_MAGIC, labels_path)?;

    let image_count = be_u32(&images, 4, images_path)? as usize;
    let rows = be_u32(&images, 8, images_path)? as usize;
    let cols = be_u32(&images, 12, images_path)? as usize;
    let label_count = be_u32(&labels, 4, labels_path)? as usize;
    if image_count != label_count {
        return Err(Error::CountMismatch {
            images: images_path.to_path_buf(),
            labels: labels_path.to_path_buf(),
            image_count,
            label_count,
        });
    }
    let dim = rows * cols;
    let body = &images[16..];
    if body.len() < image_count * dim {
        return Err(Error::Truncated {
            path: images_path.to_path_buf(),
            detail: format!("{} pixel bytes, expected {}", body.len(), image_count * dim),
        });
    }
    let label_body = &labels[8..];
    if label_body.len() < label_count {
        return Err(Error::Truncated {
            path: labels_path.to_path_buf(),
            detail: format!("{} label bytes, expected {label_count}", label_body.len()),
        });
    }
    Ok((
        body[..image_count * dim].to_vec(),
        label_body[..label_count].iter().map(|l| u32::from(*l)).collect(),
        dim,
    ))
}

pub const FMNIST_FILES: [(&str, &str); 2] = [
    ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
];

/// Pools the Fashion-MNIST train and test files found in `dir` (train first).
pub fn load_fmnist<T: Scalar>(dir: &Path) -> Result<Dataset<T>> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    let mut dim = 0;
    for (img, lbl) in FMNIST_FILES {
        let (p, l, d) = read_idx_pair(&dir.join(img), &dir.join(lbl))?;
        if dim != 0 && d != dim {
            return Err(Error::InvalidDataset(format!("{img}: image size {d} differs from {dim}")));
        }
        dim = d;
        pixels.extend(p);
        labels.extend(l);
    }
    Dataset::new(DatasetName::Fmnist, 10, dim, Features::Pixels(pixels), labels)
}

pub fn cifar_files(variant: DatasetName) -> Result<Vec<&'static str>> {
    match variant {
        DatasetName::Cifar10 => Ok(vec![
            "data_batch_1.bin",
            "data_batch_2.bin",
            "data_batch_3.bin",
            "data_batch_4.bin",
            "data_batch_5.bin",
            "test_batch.bin",
        ]),
        DatasetName::Cifar100 => Ok(vec!["train.bin", "test.bin"]),
        other => Err(Error::InvalidDataset(format!("{other} is not a CIFAR variant"))),
    }
}

/// Pools the CIFAR binary batches in `dir`, train batches first. CIFAR-100
/// uses the fine label.
pub fn load_cifar<T: Scalar>(dir: &Path, variant: DatasetName) -> Result<Dataset<T>> {
    let (label_bytes, num_classes) = match variant {
        DatasetName::Cifar10 => (1, 10),
        DatasetName::Cifar100 => (2, 100),
        other => return Err(Error::InvalidDataset(format!("{other} is not a CIFAR variant"))),
    };
    let record = label_bytes + CIFAR_PIXELS;
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for name in cifar_files(variant)? {
        let path = dir.join(name);
        let bytes = read_file(&path)?;
        if bytes.is_empty() || bytes.len() % record != 0 {
            return Err(Error::RecordSize {
                path,
                size: bytes.len() as u64,
                record,
            });
        }
        for rec in bytes.chunks_exact(record) {
            labels.push(u32::from(rec[label_bytes - 1]));
            pixels.extend_from_slice(&rec[label_bytes..]);
        }
    }
    Dataset::new(variant, num_classes, CIFAR_PIXELS, Features::Pixels(pixels), labels)
}

/// Conventional location of each dataset under a data root.
pub fn dataset_dir(root: &Path, name: DatasetName) -> PathBuf {
    match name {
        DatasetName::Fmnist => root.join("fmnist"),
        DatasetName::Cifar10 => root.join("cifar-10-batches-bin"),
        DatasetName::Cifar100 => root.join("cifar-100-binary"),
        DatasetName::Synthetic => root.to_path_buf(),
    }
}

pub fn load_named<T: Scalar>(root: &Path, name: DatasetName) -> Result<Dataset<T>> {
    let dir = dataset_dir(root, name);
    match name {
        DatasetName::Fmnist => load_fmnist(&dir),
        DatasetName::Cifar10 | DatasetName::Cifar100 => load_cifar(&dir, name),
        DatasetName::Synthetic => Err(Error::InvalidDataset("synthetic data is generated, not loaded".into())),
    }
}

const CENTROID_ATTEMPTS: usize = 1_000;
const CENTROID_RESTARTS: usize = 100;

/// Seeded class centroids in the unit cube, pairwise at least `2 * sigma`
/// apart whenever the rejection sampler can achieve it.
pub fn synthetic_centroids(num_classes: usize, feature_dim: usize, rng: &mut Pcg64) -> Vec<Vec<f64>> {
    let min_dist2 = (2.0 * SYNTHETIC_SIGMA).powi(2);
    let mut best: Vec<Vec<f64>> = Vec::new();
    for _ in 0..CENTROID_RESTARTS {
        let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
        'class: while centroids.len() < num_classes {
            for _ in 0..CENTROID_ATTEMPTS {
                let c: Vec<f64> = (0..feature_dim).map(|_| rng.random::<f64>()).collect();
                let far = centroids
                    .iter()
                    .all(|o| o.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum::<f64>() >= min_dist2);
                if far {
                    centroids.push(c);
                    continue 'class;
                }
            }
            break;
        }
        if centroids.len() == num_classes {
            return centroids;
        }
        if centroids.len() > best.len() {
            best = centroids;
        }
    }
    // Separation is infeasible (e.g. many classes in very few dimensions):
    // keep the best prefix and fill the rest unconstrained.
    while best.len() < num_classes {
        best.push((0..feature_dim).map(|_| rng.random::<f64>()).collect());
    }
    best
}

/// Gaussian blobs clipped to `[0, 1]`, class-major sample order.
pub fn make_synthetic<T: Scalar>(
    num_classes: usize,
    samples_per_class: usize,
    feature_dim: usize,
    seed: u64,
) -> Result<Dataset<T>> {
    if num_classes == 0 || samples_per_class == 0 || feature_dim == 0 {
        return Err(Error::InvalidDataset("synthetic dimensions must be positive".into()));
    }
    let mut rng = Pcg64::seed_from_u64(seed);
    let centroids = synthetic_centroids(num_classes, feature_dim, &mut rng);
    let noise = Normal::new(0.0, SYNTHETIC_SIGMA).expect("valid sigma");
    let mut features = Vec::with_capacity(num_classes * samples_per_class * feature_dim);
    let mut labels = Vec::with_capacity(num_classes * samples_per_class);
    for (class, centre) in centroids.iter().enumerate() {
        for _ in 0..samples_per_class {
            features.extend(centre.iter().map(|c| T::from_f64_lossy((c + noise.sample(&mut rng)).clamp(0.0, 1.0))));
            labels.push(class as u32);
        }
    }
    Dataset::new(DatasetName::Synthetic, num_classes, feature_dim, Features::Dense(features), labels)
}
