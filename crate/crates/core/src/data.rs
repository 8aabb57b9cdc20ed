//! Datasets, MNIST IDX files, and client partitioning.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{substream, PARTITION_STREAM};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Mean and standard deviation of MNIST training pixels on the `[0, 1]` scale.
pub const MNIST_PIXEL_MEAN: f64 = 0.1307;
pub const MNIST_PIXEL_STD: f64 = 0.3081;

/// Feature preprocessing applied after loading.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PixelScaling {
    /// Raw pixels divided by 255.
    #[default]
    Unit,
    /// `(x − mean) / std` on top of the unit scale.
    Standardize { mean: f64, std: f64 },
}

impl PixelScaling {
    pub fn mnist_standard() -> Self {
        PixelScaling::Standardize {
            mean: MNIST_PIXEL_MEAN,
            std: MNIST_PIXEL_STD,
        }
    }
}

/// Dense row-major feature matrix with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub n_features: usize,
    pub n_classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, n_features: usize, n_classes: usize) -> Result<Self> {
        if n_features == 0 || features.len() != labels.len() * n_features {
            return Err(Error::DimensionMismatch {
                expected: labels.len() * n_features,
                got: features.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::invalid(format!("label {bad} outside 0..{n_classes}")));
        }
        Ok(Self {
            features,
            labels,
            n_features,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    /// Copies the selected rows into a new dataset.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.n_features);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        Dataset {
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            n_features: self.n_features,
            n_classes: self.n_classes,
        }
    }

    pub fn scaled(mut self, scaling: PixelScaling) -> Result<Dataset> {
        if let PixelScaling::Standardize { mean, std } = scaling {
            if !(std > 0.0 && std.is_finite() && mean.is_finite()) {
                return Err(Error::invalid(format!("bad standardization ({mean}, {std})")));
            }
            for x in &mut self.features {
                *x = (*x - mean) / std;
            }
        }
        Ok(self)
    }

    /// Appends a constant 1 feature to every row (bias term).
    pub fn with_bias_feature(&self) -> Dataset {
        let f = self.n_features;
        let mut features = Vec::with_capacity(self.len() * (f + 1));
        for i in 0..self.len() {
            features.extend_from_slice(self.row(i));
            features.push(1.0);
        }
        Dataset {
            features,
            labels: self.labels.clone(),
            n_features: f + 1,
            n_classes: self.n_classes,
        }
    }
}

/// One client's slice of a shared dataset.
#[derive(Debug, Clone)]
pub struct ClientShard {
    pub client_id: usize,
    pub data: Arc<Dataset>,
    pub indices: Vec<usize>,
}

impl ClientShard {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn row(&self, local: usize) -> &[f64] {
        self.data.row(self.indices[local])
    }

    pub fn label(&self, local: usize) -> usize {
        self.data.labels[self.indices[local]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionScheme {
    #[default]
    Iid,
    /// Samples sorted by label before chunking, so each client sees only a
    /// few classes.
    LabelSorted,
}

#[derive(Debug, Clone)]
pub struct Partition {
    pub shards: Vec<ClientShard>,
    pub scheme: PartitionScheme,
    pub seed: u64,
    /// Rows not assigned to any client, in permutation order.
    pub holdout: Vec<usize>,
}

impl Partition {
    /// Indices of every row owned by some client, in client order.
    pub fn train_indices(&self) -> Vec<usize> {
        self.shards.iter().flat_map(|s| s.indices.iter().copied()).collect()
    }
}

/// Shuffles the rows, gives each client a contiguous chunk of
/// `per_client`, and keeps the rest as a holdout set.
pub fn partition_iid(
    data: Arc<Dataset>,
    n_clients: usize,
    per_client: usize,
    seed: u64,
) -> Result<Partition> {
    partition(data, n_clients, per_client, seed, PartitionScheme::Iid)
}

pub fn partition(
    data: Arc<Dataset>,
    n_clients: usize,
    per_client: usize,
    seed: u64,
    scheme: PartitionScheme,
) -> Result<Partition> {
    if n_clients == 0 || per_client == 0 {
        return Err(Error::invalid("n_clients and per_client must be positive"));
    }
    let needed = n_clients
        .checked_mul(per_client)
        .ok_or_else(|| Error::invalid("partition size overflows"))?;
    if needed > data.len() {
        return Err(Error::invalid(format!(
            "{n_clients} clients x {per_client} samples needs {needed} rows, dataset has {}",
            data.len()
        )));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut substream(seed, 0, PARTITION_STREAM));
    let holdout = order.split_off(needed);
    if scheme == PartitionScheme::LabelSorted {
        // stable sort keeps the shuffled order within each class
        order.sort_by_key(|&i| data.labels[i]);
    }
    let shards = order
        .chunks(per_client)
        .enumerate()
        .map(|(client_id, chunk)| ClientShard {
            client_id,
            data: Arc::clone(&data),
            indices: chunk.to_vec(),
        })
        .collect();
    Ok(Partition {
        shards,
        scheme,
        seed,
        holdout,
    })
}

fn read_be_u32(bytes: &[u8], offset: usize, path: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated {
            path: path.to_owned(),
            expected: offset + 4,
            found: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32, path: &str) -> Result<()> {
    let found = read_be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(Error::BadMagic {
            path: path.to_owned(),
            expected,
            found,
        });
    }
    Ok(())
}

fn check_payload(bytes: &[u8], header: usize, payload: usize, path: &str) -> Result<()> {
    if bytes.len() < header + payload {
        return Err(Error::Truncated {
            path: path.to_owned(),
            expected: header + payload,
            found: bytes.len(),
        });
    }
    Ok(())
}

/// Reads an IDX image/label pair. Pixels are scaled to `[0, 1]`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let ipath = images_path.as_ref().display().to_string();
    let lpath = labels_path.as_ref().display().to_string();
    let images = fs::read(images_path)?;
    let labels = fs::read(labels_path)?;

    check_magic(&images, IDX_IMAGES_MAGIC, &ipath)?;
    let n_images = read_be_u32(&images, 4, &ipath)? as usize;
    let rows = read_be_u32(&images, 8, &ipath)? as usize;
    let cols = read_be_u32(&images, 12, &ipath)? as usize;
    let n_features = rows * cols;
    check_payload(&images, 16, n_images * n_features, &ipath)?;

    check_magic(&labels, IDX_LABELS_MAGIC, &lpath)?;
    let n_labels = read_be_u32(&labels, 4, &lpath)? as usize;
    check_payload(&labels, 8, n_labels, &lpath)?;

    if n_images != n_labels {
        return Err(Error::CountMismatch {
            images: n_images,
            labels: n_labels,
        });
    }
    let features = images[16..16 + n_images * n_features]
        .iter()
        .map(|&p| p as f64 / 255.0)
        .collect();
    let labels: Vec<usize> = labels[8..8 + n_labels].iter().map(|&l| l as usize).collect();
    let n_classes = labels.iter().max().map_or(1, |m| m + 1);
    Dataset::new(features, labels, n_features, n_classes)
}

/// Writes an IDX image/label pair; pixels must lie in `[0, 1]` and are
/// stored as `round(255·x)`.
pub fn write_idx(
    data: &Dataset,
    rows: usize,
    cols: usize,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    if rows * cols != data.n_features {
        return Err(Error::DimensionMismatch {
            expected: data.n_features,
            got: rows * cols,
        });
    }
    let mut images = Vec::with_capacity(16 + data.features.len());
    for v in [IDX_IMAGES_MAGIC, data.len() as u32, rows as u32, cols as u32] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    images.extend(data.features.iter().map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8));

    let mut labels = Vec::with_capacity(8 + data.len());
    for v in [IDX_LABELS_MAGIC, data.len() as u32] {
        labels.extend_from_slice(&v.to_be_bytes());
    }
    for &l in &data.labels {
        let byte = u8::try_from(l).map_err(|_| Error::invalid(format!("label {l} does not fit in a byte")))?;
        labels.push(byte);
    }
    fs::File::create(images_path)?.write_all(&images)?;
    fs::File::create(labels_path)?.write_all(&labels)?;
    Ok(())
}

/// Standard file names of the MNIST distribution inside `dir`.
pub fn load_mnist(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let train = load_idx(
        dir.join("train-images-idx3-ubyte"),
        dir.join("train-labels-idx1-ubyte"),
    )?;
    let test = load_idx(
        dir.join("t10k-images-idx3-ubyte"),
        dir.join("t10k-labels-idx1-ubyte"),
    )?;
    Ok((train, test))
}

/// Gaussian class clusters: class `c` has mean `separation·e_{c mod dim}`
/// and unit isotropic covariance. Labels are balanced round-robin.
pub fn synth_classification(
    n: usize,
    dim: usize,
    classes: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if dim == 0 || classes < 2 {
        return Err(Error::invalid("need dim >= 1 and classes >= 2"));
    }
    let mut rng = substream(seed, 0, 0);
    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        for k in 0..dim {
            let z: f64 = rng.sample(StandardNormal);
            let mean = if k == c % dim { separation } else { 0.0 };
            features.push(mean + z);
        }
        labels.push(c);
    }
    Dataset::new(features, labels, dim, classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn toy(n: usize) -> Arc<Dataset> {
        let features = (0..n * 2).map(|x| x as f64).collect();
        let labels = (0..n).map(|i| i % 3).collect();
        Arc::new(Dataset::new(features, labels, 2, 3).unwrap())
    }

    #[test]
    fn standardization() {
        let d = Dataset::new(vec![0.0, 0.5, 1.0, 0.25], vec![0, 1], 2, 2).unwrap();
        let s = d.clone().scaled(PixelScaling::Standardize { mean: 0.5, std: 0.25 }).unwrap();
        assert_eq!(s.features, vec![-2.0, 0.0, 2.0, -1.0]);
        assert_eq!(d.clone().scaled(PixelScaling::Unit).unwrap(), d);
        assert!(d.scaled(PixelScaling::Standardize { mean: 0.0, std: 0.0 }).is_err());
    }

    #[test]
    fn iid_partition_shapes() {
        let p = partition_iid(toy(500), 40, 10, 9).unwrap();
        assert_eq!(p.shards.len(), 40);
        assert!(p.shards.iter().all(|s| s.len() == 10));
        assert_eq!(p.holdout.len(), 100);
        let all: HashSet<usize> = p.train_indices().into_iter().chain(p.holdout.iter().copied()).collect();
        assert_eq!(all.len(), 500);
        let train: HashSet<usize> = p.train_indices().into_iter().collect();
        assert_eq!(train.len(), 400);
    }

    #[test]
    fn partition_is_deterministic() {
        let a = partition_iid(toy(100), 5, 10, 3).unwrap();
        let b = partition_iid(toy(100), 5, 10, 3).unwrap();
        assert_eq!(a.train_indices(), b.train_indices());
        let c = partition_iid(toy(100), 5, 10, 4).unwrap();
        assert_ne!(a.train_indices(), c.train_indices());
        let one = partition_iid(toy(100), 1, 10, 3).unwrap();
        assert_eq!(one.shards[0].indices, a.shards[0].indices);
    }

    #[test]
    fn label_sorted_groups_classes() {
        let p = partition(toy(90), 3, 30, 1, PartitionScheme::LabelSorted).unwrap();
        for s in &p.shards {
            let labels: HashSet<usize> = (0..s.len()).map(|i| s.label(i)).collect();
            assert_eq!(labels.len(), 1);
        }
    }

    #[test]
    fn partition_rejects_oversubscription() {
        assert!(partition_iid(toy(10), 3, 4, 0).is_err());
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = synth_classification(50, 4, 3, 2.0, 7).unwrap();
        let b = synth_classification(50, 4, 3, 2.0, 7).unwrap();
        assert_eq!(a, b);
        let bytes_a: Vec<u8> = a.features.iter().flat_map(|x| x.to_le_bytes()).collect();
        let bytes_b: Vec<u8> = b.features.iter().flat_map(|x| x.to_le_bytes()).collect();
        assert_eq!(bytes_a, bytes_b);
    }

    #[test]
    fn dataset_validation() {
        assert!(Dataset::new(vec![0.0; 5], vec![0, 1], 2, 2).is_err());
        assert!(Dataset::new(vec![0.0; 4], vec![0, 2], 2, 2).is_err());
        let d = toy(3).with_bias_feature();
        assert_eq!(d.n_features, 3);
        assert_eq!(d.row(1), &[2.0, 3.0, 1.0]);
    }
}
