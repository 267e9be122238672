//! Datasets: IDX loading, synthetic class blobs and random client partitions.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{stream, Purpose};
use crate::tensor::{Shape, Tensor};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad IDX magic {found:#010x}, expected {expected:#010x}")]
    BadMagic { path: String, expected: u32, found: u32 },
    #[error("{path}: truncated IDX file, expected {expected} bytes but found {actual}")]
    Truncated { path: String, expected: usize, actual: usize },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} at index {index} is not below the class count {classes}")]
    LabelOutOfRange { index: usize, label: usize, classes: usize },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("cannot split {samples} samples into {clients} clients")]
    TooManyClients { samples: usize, clients: usize },
    #[error("size jitter must lie in [0, 1), got {0}")]
    BadJitter(f64),
}

/// Images `(count, h, w, channels)` in `[0, 1]` with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self, DataError> {
        if images.dims().len() != 4 {
            return Err(DataError::Invalid(format!("images must be (count, h, w, c), got {}", images.shape())));
        }
        if images.dims()[0] != labels.len() {
            return Err(DataError::CountMismatch { images: images.dims()[0], labels: labels.len() });
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(DataError::LabelOutOfRange { index, label, classes });
        }
        Ok(Dataset { images, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    /// `(h, w, channels)`.
    pub fn sample_dims(&self) -> (usize, usize, usize) {
        let d = self.images.dims();
        (d[1], d[2], d[3])
    }

    fn sample_len(&self) -> usize {
        let (h, w, c) = self.sample_dims();
        h * w * c
    }

    /// Gathers the given samples, in order, into a batch.
    ///
    /// Panics on an empty index list: tensors have no zero extents.
    pub fn gather(&self, indices: &[usize]) -> Batch {
        assert!(!indices.is_empty(), "cannot gather an empty batch");
        let len = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * len..(i + 1) * len]);
            labels.push(self.labels[i]);
        }
        let (h, w, c) = self.sample_dims();
        let inputs = Tensor::from_vec(&[indices.len(), h, w, c], data).expect("gathered batch is well formed");
        Batch { inputs, labels }
    }

    /// First `count` samples (or all, if fewer).
    pub fn truncate(&self, count: usize) -> Dataset {
        let count = count.min(self.len());
        let indices: Vec<usize> = (0..count).collect();
        self.subset(&indices)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let batch = self.gather(indices);
        Dataset { images: batch.inputs, labels: batch.labels, classes: self.classes }
    }

    /// Per-class sample counts.
    pub fn label_histogram(&self, indices: &[usize]) -> Vec<usize> {
        let mut hist = vec![0; self.classes];
        for &i in indices {
            hist[self.labels[i]] += 1;
        }
        hist
    }
}

/// A minibatch: inputs `(batch, h, w, channels)` and one label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    let io = |source| DataError::Io { path: path.display().to_string(), source };
    let raw = fs::read(path).map_err(io)?;
    if raw.starts_with(&GZIP_MAGIC) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out).map_err(io)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

/// Parses an IDX ubyte buffer, returning its dimensions and payload.
fn parse_idx<'a>(path: &Path, bytes: &'a [u8], magic: u32) -> Result<(Vec<usize>, &'a [u8]), DataError> {
    let name = || path.display().to_string();
    if bytes.len() < 4 {
        return Err(DataError::Truncated { path: name(), expected: 4, actual: bytes.len() });
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(DataError::BadMagic { path: name(), expected: magic, found });
    }
    let rank = (magic & 0xff) as usize;
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(DataError::Truncated { path: name(), expected: header, actual: bytes.len() });
    }
    let dims: Vec<usize> = (0..rank).map(|i| be_u32(bytes, 4 + 4 * i) as usize).collect();
    let expected = header + dims.iter().product::<usize>();
    if bytes.len() < expected {
        return Err(DataError::Truncated { path: name(), expected, actual: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(DataError::Invalid(format!(
            "{}: {} trailing bytes after the declared payload",
            name(),
            bytes.len() - expected
        )));
    }
    Ok((dims, &bytes[header..]))
}

/// Loads an IDX image/label file pair (optionally gzipped). Pixels are scaled
/// by `1/255`; the class count is `max(label) + 1`, at least 10.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let image_bytes = read_file(images_path)?;
    let label_bytes = read_file(labels_path)?;
    let (idims, pixels) = parse_idx(images_path, &image_bytes, IDX_IMAGES_MAGIC)?;
    let (ldims, labels) = parse_idx(labels_path, &label_bytes, IDX_LABELS_MAGIC)?;
    if idims[0] != ldims[0] {
        return Err(DataError::CountMismatch { images: idims[0], labels: ldims[0] });
    }
    let shape = Shape::new([idims[0], idims[1], idims[2], 1]).map_err(|e| DataError::Invalid(e.to_string()))?;
    let data = pixels.iter().map(|&b| b as f32 / 255.0).collect();
    let images = Tensor::new(shape, data).map_err(|e| DataError::Invalid(e.to_string()))?;
    let labels: Vec<usize> = labels.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(10);
    Dataset::new(images, labels, classes)
}

/// Writes a single-channel dataset as an uncompressed IDX pair. Pixels are
/// stored as `round(v * 255)`, so IDX-loaded data writes back byte-for-byte.
pub fn write_idx(
    dataset: &Dataset,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<(), DataError> {
    let (h, w, c) = dataset.sample_dims();
    if c != 1 {
        return Err(DataError::Invalid(format!("IDX images need one channel, got {c}")));
    }
    let count = dataset.len() as u32;
    let mut img = Vec::with_capacity(16 + dataset.images.numel());
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for d in [count, h as u32, w as u32] {
        img.extend_from_slice(&d.to_be_bytes());
    }
    img.extend(
        dataset.images.data()[..dataset.len() * h * w].iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    let mut lab = Vec::with_capacity(8 + dataset.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&count.to_be_bytes());
    for &l in &dataset.labels {
        let byte = u8::try_from(l).map_err(|_| DataError::Invalid(format!("label {l} exceeds a byte")))?;
        lab.push(byte);
    }
    for (path, bytes) in [(images_path.as_ref(), img), (labels_path.as_ref(), lab)] {
        fs::File::create(path)
            .and_then(|mut f| f.write_all(&bytes))
            .map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    }
    Ok(())
}

/// Gaussian class blobs around `0.5 ± 0.3` sign patterns with `σ = 0.08`,
/// clamped to `[0, 1]`. Class means differ in many pixels by `0.6`, so the
/// classes are linearly separable by a margin far beyond `2σ`.
///
/// Samples are interleaved by class (`0, 1, .., C-1, 0, 1, ..`).
pub fn synth_dataset(
    classes: usize,
    per_class: usize,
    dims: (usize, usize, usize),
    seed: u64,
) -> Result<Dataset, DataError> {
    if classes == 0 || per_class == 0 {
        return Err(DataError::Invalid("classes and per-class count must be positive".into()));
    }
    let (h, w, c) = dims;
    let len = h * w * c;
    let mut rng = stream(seed, Purpose::Synth, 0, 0);
    let means: Vec<Vec<f32>> =
        (0..classes).map(|_| (0..len).map(|_| if rng.random_bool(0.5) { 0.8 } else { 0.2 }).collect()).collect();
    let noise = Normal::new(0.0f32, 0.08).expect("valid sigma");
    let count = classes * per_class;
    let mut data = Vec::with_capacity(count * len);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..per_class {
        for (class, mean) in means.iter().enumerate() {
            data.extend(mean.iter().map(|&m| (m + noise.sample(&mut rng)).clamp(0.0, 1.0)));
            labels.push(class);
        }
    }
    let images = Tensor::from_vec(&[count, h, w, c], data).map_err(|e| DataError::Invalid(e.to_string()))?;
    Dataset::new(images, labels, classes)
}

/// Sample indices dealt to each client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub seed: u64,
    pub size_jitter: f64,
    pub assignments: Vec<Vec<usize>>,
}

impl PartitionPlan {
    pub fn clients(&self) -> usize {
        self.assignments.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.assignments.iter().map(Vec::len).collect()
    }
}

/// Shuffles `0..samples` and deals it into `clients` parts whose sizes stay
/// within `floor(q(1-j)) ..= ceil(q(1+j))` for `q = samples / clients`.
pub fn partition_random(
    samples: usize,
    clients: usize,
    seed: u64,
    size_jitter: f64,
) -> Result<PartitionPlan, DataError> {
    if clients == 0 || clients > samples {
        return Err(DataError::TooManyClients { samples, clients });
    }
    if !(0.0..1.0).contains(&size_jitter) {
        return Err(DataError::BadJitter(size_jitter));
    }
    let mut rng = stream(seed, Purpose::Partition, 0, 0);
    let quota = samples as f64 / clients as f64;
    let lo = ((quota * (1.0 - size_jitter)).floor() as usize).max(1);
    let hi = (quota * (1.0 + size_jitter)).ceil() as usize;

    let mut sizes: Vec<usize> = (0..clients).map(|_| rng.random_range(lo..=hi)).collect();
    // Walk the sizes back onto the exact total, one sample at a time.
    let mut total: usize = sizes.iter().sum();
    while total != samples {
        let k = rng.random_range(0..clients);
        if total < samples && sizes[k] < hi {
            sizes[k] += 1;
            total += 1;
        } else if total > samples && sizes[k] > lo {
            sizes[k] -= 1;
            total -= 1;
        }
    }

    let mut order: Vec<usize> = (0..samples).collect();
    order.shuffle(&mut rng);
    let mut assignments = Vec::with_capacity(clients);
    let mut start = 0;
    for size in sizes {
        assignments.push(order[start..start + size].to_vec());
        start += size;
    }
    Ok(PartitionPlan { seed, size_jitter, assignments })
}
