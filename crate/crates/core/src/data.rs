//! Datasets: MNIST IDX loading, a seeded Gaussian stand-in, and label-skew
//! partitioning across participants.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::model::BatchView;
use crate::seed::{stream_rng, Stream};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const MNIST_CLASSES: usize = 10;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("failed to read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad IDX magic at byte 0: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("IDX file truncated at byte {offset}: need {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("IDX file has {0} trailing bytes")]
    TrailingBytes(usize),
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} at byte {offset} is outside 0..{classes}")]
    LabelOutOfRange { offset: usize, label: u8, classes: usize },
    #[error("invalid dataset argument: {0}")]
    InvalidArgument(String),
    #[error("cannot partition: {0}")]
    Partition(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Labeled rows with features in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetShard {
    inputs: Vec<f64>,
    labels: Vec<usize>,
    feature_dim: usize,
    classes: usize,
    pub owner_id: usize,
}

impl DatasetShard {
    pub fn new(inputs: Vec<f64>, labels: Vec<usize>, feature_dim: usize, classes: usize) -> Result<Self> {
        if feature_dim == 0 || classes == 0 {
            return Err(DataError::InvalidArgument("feature_dim and classes must be positive".into()));
        }
        if inputs.len() != labels.len() * feature_dim {
            return Err(DataError::InvalidArgument(format!(
                "{} inputs cannot hold {} rows of {} features",
                inputs.len(),
                labels.len(),
                feature_dim
            )));
        }
        if let Some(l) = labels.iter().find(|l| **l >= classes) {
            return Err(DataError::InvalidArgument(format!("label {l} outside 0..{classes}")));
        }
        Ok(Self { inputs, labels, feature_dim, classes, owner_id: 0 })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn view(&self) -> BatchView<'_> {
        BatchView { inputs: &self.inputs, labels: &self.labels }
    }

    /// Copies the given rows into a new shard with the same owner.
    pub fn select(&self, rows: &[usize]) -> DatasetShard {
        let mut inputs = Vec::with_capacity(rows.len() * self.feature_dim);
        for &r in rows {
            inputs.extend_from_slice(self.row(r));
        }
        DatasetShard {
            inputs,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            feature_dim: self.feature_dim,
            classes: self.classes,
            owner_id: self.owner_id,
        }
    }

    /// First `n` rows (or all of them).
    pub fn truncate(&self, n: usize) -> DatasetShard {
        let rows: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&rows)
    }

    /// Distinct labels present in the shard, ascending.
    pub fn label_set(&self) -> Vec<usize> {
        let mut seen = vec![false; self.classes];
        self.labels.iter().for_each(|&l| seen[l] = true);
        (0..self.classes).filter(|&c| seen[c]).collect()
    }

    /// Moves the last `per_class` rows of every class into a second shard.
    pub fn split_per_class(&self, per_class: usize) -> (DatasetShard, DatasetShard) {
        let mut held = vec![0usize; self.classes];
        let mut test = Vec::new();
        let mut train = Vec::new();
        for i in (0..self.len()).rev() {
            let c = self.labels[i];
            if held[c] < per_class {
                held[c] += 1;
                test.push(i);
            } else {
                train.push(i);
            }
        }
        train.reverse();
        test.reverse();
        (self.select(&train), self.select(&test))
    }
}

struct IdxReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> IdxReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(DataError::Truncated { offset: self.bytes.len(), needed: self.pos + n - self.bytes.len() });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32_be(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let found = self.u32_be()?;
        if found != expected {
            return Err(DataError::BadMagic { expected, found });
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        match self.bytes.len() - self.pos {
            0 => Ok(()),
            n => Err(DataError::TrailingBytes(n)),
        }
    }
}

/// Parses an IDX3 image file into `(rows·cols)`-wide feature rows scaled by 1/255.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(Vec<f64>, usize)> {
    let mut r = IdxReader { bytes, pos: 0 };
    r.magic(IDX_IMAGES_MAGIC)?;
    let count = r.u32_be()? as usize;
    let rows = r.u32_be()? as usize;
    let cols = r.u32_be()? as usize;
    let pixels = r.take(count * rows * cols)?;
    r.finish()?;
    Ok((pixels.iter().map(|&p| f64::from(p) / 255.0).collect(), rows * cols))
}

/// Parses an IDX1 label file, rejecting labels outside `0..classes`.
pub fn parse_idx_labels(bytes: &[u8], classes: usize) -> Result<Vec<usize>> {
    let mut r = IdxReader { bytes, pos: 0 };
    r.magic(IDX_LABELS_MAGIC)?;
    let count = r.u32_be()? as usize;
    let start = r.pos;
    let raw = r.take(count)?;
    r.finish()?;
    raw.iter()
        .enumerate()
        .map(|(i, &label)| {
            if usize::from(label) < classes {
                Ok(usize::from(label))
            } else {
                Err(DataError::LabelOutOfRange { offset: start + i, label, classes })
            }
        })
        .collect()
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })
}

/// Loads an MNIST image/label file pair.
pub fn load_mnist_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<DatasetShard> {
    let (inputs, feature_dim) = parse_idx_images(&read(images_path.as_ref())?)?;
    let labels = parse_idx_labels(&read(labels_path.as_ref())?, MNIST_CLASSES)?;
    let images = if feature_dim == 0 { 0 } else { inputs.len() / feature_dim };
    if images != labels.len() {
        return Err(DataError::CountMismatch { images, labels: labels.len() });
    }
    DatasetShard::new(inputs, labels, feature_dim.max(1), MNIST_CLASSES)
}

/// Train and test splits from a directory holding the four standard files.
pub fn load_mnist_dir(dir: impl AsRef<Path>) -> Result<(DatasetShard, DatasetShard)> {
    let dir = dir.as_ref();
    let train = load_mnist_idx(dir.join("train-images-idx3-ubyte"), dir.join("train-labels-idx1-ubyte"))?;
    let test = load_mnist_idx(dir.join("t10k-images-idx3-ubyte"), dir.join("t10k-labels-idx1-ubyte"))?;
    Ok((train, test))
}

/// Label-skew split into `m` disjoint shards.
///
/// Each shard in turn takes the `classes_per_client` classes held by the
/// fewest shards so far, ties broken at random, so every class is covered once
/// `m·classes_per_client ≥ classes` and holder counts differ by at most one.
/// Every class's rows are shuffled and divided as evenly as possible among the
/// shards that hold it.
pub fn partition_noniid(data: &DatasetShard, m: usize, classes_per_client: usize, seed: u64) -> Result<Vec<DatasetShard>> {
    let classes = data.classes();
    if m == 0 {
        return Err(DataError::Partition("need at least one client".into()));
    }
    if classes_per_client == 0 || classes_per_client > classes {
        return Err(DataError::Partition(format!(
            "classes_per_client must be in 1..={classes}, got {classes_per_client}"
        )));
    }
    if m * classes_per_client < classes {
        return Err(DataError::Partition(format!(
            "{m} clients × {classes_per_client} classes cannot cover all {classes} classes"
        )));
    }
    let mut rng = stream_rng(seed, Stream::Partition, &[]);
    let mut holders: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for client in 0..m {
        // least-held classes first, random among equals
        let mut order: Vec<(usize, u64, usize)> = (0..classes).map(|c| (holders[c].len(), rng.gen(), c)).collect();
        order.sort_unstable();
        for &(_, _, c) in &order[..classes_per_client] {
            holders[c].push(client);
        }
    }

    let mut rows_by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in data.labels().iter().enumerate() {
        rows_by_class[l].push(i);
    }

    let mut assignment: Vec<Vec<usize>> = vec![Vec::new(); m];
    for (class, rows) in rows_by_class.iter_mut().enumerate() {
        let owners = &holders[class];
        if rows.len() < owners.len() {
            return Err(DataError::Partition(format!(
                "class {class} has {} samples for {} shards",
                rows.len(),
                owners.len()
            )));
        }
        rows.shuffle(&mut rng);
        let base = rows.len() / owners.len();
        let extra = rows.len() % owners.len();
        let mut start = 0;
        for (j, &client) in owners.iter().enumerate() {
            let len = base + usize::from(j < extra);
            assignment[client].extend_from_slice(&rows[start..start + len]);
            start += len;
        }
    }

    Ok(assignment
        .into_iter()
        .enumerate()
        .map(|(client, mut rows)| {
            rows.sort_unstable();
            let mut shard = data.select(&rows);
            shard.owner_id = client;
            shard
        })
        .collect())
}

/// Parameters of the Gaussian-mixture stand-in dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub feature_dim: usize,
    /// Distance between class means in units of the (unit) per-axis noise.
    pub separation: f64,
    pub seed: u64,
}

/// Rows of class `c` are `μ_c + N(0, I)`, then every feature is min-max scaled
/// to `[0, 1]` across the whole set. Class means sit `separation` apart.
pub fn synthetic_gaussian(spec: SyntheticSpec) -> Result<DatasetShard> {
    let SyntheticSpec { classes, per_class, feature_dim, separation, seed } = spec;
    if classes == 0 || per_class == 0 || feature_dim == 0 {
        return Err(DataError::InvalidArgument("classes, per_class and feature_dim must all be ≥ 1".into()));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(DataError::InvalidArgument(format!("separation must be finite and ≥ 0, got {separation}")));
    }
    let mut rng = stream_rng(seed, Stream::Dataset, &[]);
    let radius = separation / std::f64::consts::SQRT_2;
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|c| {
            if classes <= feature_dim {
                // orthogonal axes: pairwise distance exactly `separation`
                (0..feature_dim).map(|i| if i == c { radius } else { 0.0 }).collect()
            } else {
                let dir: Vec<f64> = (0..feature_dim).map(|_| rng.sample(StandardNormal)).collect();
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                dir.into_iter().map(|v| v / norm * radius).collect()
            }
        })
        .collect();

    let n = classes * per_class;
    let mut inputs = Vec::with_capacity(n * feature_dim);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..per_class {
        for (c, mean) in means.iter().enumerate() {
            inputs.extend(mean.iter().map(|m| m + rng.sample::<f64, _>(StandardNormal)));
            labels.push(c);
        }
    }
    for f in 0..feature_dim {
        let column = (0..n).map(|i| inputs[i * feature_dim + f]);
        let (lo, hi) = column.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        let range = hi - lo;
        for i in 0..n {
            let v = &mut inputs[i * feature_dim + f];
            *v = if range > 0.0 { (*v - lo) / range } else { 0.0 };
        }
    }
    DatasetShard::new(inputs, labels, feature_dim, classes)
}
