//! Dataset ingestion and client partitioning.
//!
//! Two sources: IDX files (the MNIST container format) and synthetic
//! Gaussian blobs for desk-scale runs. Either way the handle stores flat
//! row-major features normalized to [0,1] and integer labels.
//!
//! Partitioning produces index shards, one per client: uniform IID splits
//! or Dirichlet-skewed splits where smaller `alpha` concentrates each
//! class on fewer clients.

use std::fs::File;
use std::io::{BufReader, Read as _};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::numkit::RngStream;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// An in-memory dataset: flat `len x input_dim` features in [0,1] plus
/// labels in `[0, num_classes)`. Read-only after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetHandle {
    name: String,
    features: Vec<f64>,
    input_dim: usize,
    labels: Vec<usize>,
    num_classes: usize,
}

impl DatasetHandle {
    pub(crate) fn new(
        name: String,
        features: Vec<f64>,
        input_dim: usize,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        if features.len() != labels.len() * input_dim {
            return Err(Error::DimensionMismatch {
                context: "dataset features",
                expected: labels.len() * input_dim,
                got: features.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Consistency(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        Ok(DatasetHandle {
            name,
            features,
            input_dim,
            labels,
            num_classes,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn feature_row(&self, i: usize) -> &[f64] {
        &self.features[i * self.input_dim..(i + 1) * self.input_dim]
    }

    /// Copies the given rows into a batch.
    pub fn batch_of(&self, indices: &[usize]) -> Result<Batch> {
        let mut features = Vec::with_capacity(indices.len() * self.input_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid_argument("indices", "row out of range"));
            }
            features.extend_from_slice(self.feature_row(i));
            labels.push(self.labels[i]);
        }
        Batch::new(features, self.input_dim, labels)
    }

    /// Keeps only the first `cap` samples (no-op when `cap >= len`).
    pub fn capped(mut self, cap: usize) -> Self {
        if cap < self.len() && cap > 0 {
            self.features.truncate(cap * self.input_dim);
            self.labels.truncate(cap);
        }
        self
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

/// Index shards, one per client. `alpha` is `None` for IID splits.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionPlan {
    shards: Vec<Vec<usize>>,
    alpha: Option<f64>,
}

impl PartitionPlan {
    /// Wraps externally built shards; pair with [`validate`](Self::validate)
    /// before handing them to the engine.
    pub fn from_shards(shards: Vec<Vec<usize>>, alpha: Option<f64>) -> Self {
        PartitionPlan { shards, alpha }
    }

    pub fn num_shards(&self) -> usize {
        self.shards.len()
    }

    pub fn shard(&self, i: usize) -> &[usize] {
        &self.shards[i]
    }

    pub fn shards(&self) -> &[Vec<usize>] {
        &self.shards
    }

    pub fn alpha(&self) -> Option<f64> {
        self.alpha
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.shards.iter().map(Vec::len).collect()
    }

    /// Checks disjointness, full coverage of `0..total`, and non-emptiness.
    pub fn validate(&self, total: usize) -> Result<()> {
        let mut seen = vec![false; total];
        let mut count = 0usize;
        for (s, shard) in self.shards.iter().enumerate() {
            if shard.is_empty() {
                return Err(Error::Consistency(format!("shard {s} is empty")));
            }
            for &i in shard {
                if i >= total {
                    return Err(Error::Consistency(format!("index {i} out of range")));
                }
                if seen[i] {
                    return Err(Error::Consistency(format!("index {i} in two shards")));
                }
                seen[i] = true;
                count += 1;
            }
        }
        if count != total {
            return Err(Error::Consistency(format!(
                "shards cover {count} of {total} samples"
            )));
        }
        Ok(())
    }
}

/// Loads an IDX image/label file pair (big-endian headers, u8 payload).
/// Pixels are scaled by 1/255; the class count is `max(label) + 1`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<DatasetHandle> {
    let mut images = BufReader::new(File::open(images_path)?);
    let magic = images.read_u32::<BigEndian>()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            path: images_path.display().to_string(),
            reason: format!("bad images magic 0x{magic:08x}, want 0x{IDX_IMAGES_MAGIC:08x}"),
        });
    }
    let count = images.read_u32::<BigEndian>()? as usize;
    let rows = images.read_u32::<BigEndian>()? as usize;
    let cols = images.read_u32::<BigEndian>()? as usize;
    let input_dim = rows * cols;
    let mut pixels = vec![0u8; count * input_dim];
    images.read_exact(&mut pixels)?;

    let mut labels_file = BufReader::new(File::open(labels_path)?);
    let magic = labels_file.read_u32::<BigEndian>()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            path: labels_path.display().to_string(),
            reason: format!("bad labels magic 0x{magic:08x}, want 0x{IDX_LABELS_MAGIC:08x}"),
        });
    }
    let label_count = labels_file.read_u32::<BigEndian>()? as usize;
    if label_count != count {
        return Err(Error::Consistency(format!(
            "{count} images but {label_count} labels"
        )));
    }
    let mut raw_labels = vec![0u8; label_count];
    labels_file.read_exact(&mut raw_labels)?;

    let features = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let labels: Vec<usize> = raw_labels.iter().map(|&l| l as usize).collect();
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1).max(2);
    let name = images_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".to_owned());
    DatasetHandle::new(name, features, input_dim, labels, num_classes)
}

/// Gaussian class blobs with means spread on a circle (first two input
/// components; remaining components carry noise only). Features are
/// min-max normalized per component afterwards, so `spread` controls how
/// much the classes overlap. Class-major sample order.
pub fn synth_blobs(
    num_classes: usize,
    per_class: usize,
    input_dim: usize,
    spread: f64,
    stream: &RngStream,
) -> Result<DatasetHandle> {
    if num_classes < 1 || per_class < 1 || input_dim < 1 {
        return Err(Error::invalid_argument("counts", "must be >= 1"));
    }
    if !(spread > 0.0) {
        return Err(Error::invalid_argument("spread", "must be > 0"));
    }
    let mut rng = stream.rng();
    let total = num_classes * per_class;
    let mut features = Vec::with_capacity(total * input_dim);
    let mut labels = Vec::with_capacity(total);
    for class in 0..num_classes {
        let angle = 2.0 * std::f64::consts::PI * class as f64 / num_classes as f64;
        let mean0 = 3.0 * angle.cos();
        let mean1 = 3.0 * angle.sin();
        for _ in 0..per_class {
            for j in 0..input_dim {
                let mean = match j {
                    // 1-D datasets place means on a line instead.
                    0 if input_dim == 1 => 3.0 * class as f64,
                    0 => mean0,
                    1 => mean1,
                    _ => 0.0,
                };
                let noise: f64 = rng.sample(rand_distr::StandardNormal);
                features.push(mean + spread * noise);
            }
            labels.push(class);
        }
    }
    normalize_per_component(&mut features, input_dim);
    DatasetHandle::new("synth".to_owned(), features, input_dim, labels, num_classes)
}

// Affine min-max map to [0,1] per component; constant components go to 0.5.
fn normalize_per_component(features: &mut [f64], input_dim: usize) {
    for j in 0..input_dim {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for row in features.chunks_exact(input_dim) {
            lo = lo.min(row[j]);
            hi = hi.max(row[j]);
        }
        let span = hi - lo;
        for row in features.chunks_exact_mut(input_dim) {
            row[j] = if span > 0.0 { (row[j] - lo) / span } else { 0.5 };
        }
    }
}

/// Random equal-size (within one) disjoint shards.
pub fn partition_iid(data: &DatasetHandle, n: usize, stream: &RngStream) -> Result<PartitionPlan> {
    if n < 1 {
        return Err(Error::invalid_argument("n", "must be >= 1"));
    }
    if n > data.len() {
        return Err(Error::invalid_argument(
            "n",
            format!("{n} clients but only {} samples", data.len()),
        ));
    }
    let mut rng = stream.rng();
    let mut order: Vec<usize> = (0..data.len()).collect();
    shuffle(&mut order, &mut rng);

    let base = data.len() / n;
    let extra = data.len() % n;
    let mut shards = Vec::with_capacity(n);
    let mut at = 0;
    for s in 0..n {
        let take = base + usize::from(s < extra);
        shards.push(order[at..at + take].to_vec());
        at += take;
    }
    Ok(PartitionPlan {
        shards,
        alpha: None,
    })
}

/// Dirichlet-skewed shards: per class, client proportions are drawn from
/// Dirichlet(alpha * 1_N) and the class's samples are assigned to clients
/// multinomially. Shards left empty by extreme draws are repaired by
/// stealing one sample from the largest shard.
pub fn partition_dirichlet(
    data: &DatasetHandle,
    n: usize,
    alpha: f64,
    stream: &RngStream,
) -> Result<PartitionPlan> {
    if n < 1 {
        return Err(Error::invalid_argument("n", "must be >= 1"));
    }
    if n > data.len() {
        return Err(Error::invalid_argument(
            "n",
            format!("{n} clients but only {} samples", data.len()),
        ));
    }
    if !(alpha > 0.0) {
        return Err(Error::invalid_argument("alpha", "must be > 0"));
    }
    let mut rng = stream.rng();
    let gamma = Gamma::new(alpha, 1.0)
        .map_err(|e| Error::invalid_argument("alpha", format!("gamma draw: {e}")))?;
    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); n];

    for class in 0..data.num_classes() {
        let mut props: Vec<f64> = (0..n).map(|_| gamma.sample(&mut rng)).collect();
        let sum: f64 = props.iter().sum();
        if sum > 0.0 && sum.is_finite() {
            for p in &mut props {
                *p /= sum;
            }
        } else {
            // Collapsed draw (all mass underflowed); fall back to uniform.
            props.fill(1.0 / n as f64);
        }
        let mut cdf = props;
        for i in 1..n {
            cdf[i] += cdf[i - 1];
        }
        for (i, &label) in data.labels().iter().enumerate() {
            if label != class {
                continue;
            }
            let u: f64 = rng.random();
            let shard = cdf.iter().position(|&c| u < c).unwrap_or(n - 1);
            shards[shard].push(i);
        }
    }

    // Repair pass. D >= N guarantees the largest shard has a spare sample.
    loop {
        let Some(empty) = shards.iter().position(Vec::is_empty) else {
            break;
        };
        let largest = shards
            .iter()
            .enumerate()
            .max_by_key(|(i, s)| (s.len(), usize::MAX - i))
            .map(|(i, _)| i)
            .expect("non-zero shard count");
        let moved = shards[largest].pop().expect("largest shard non-empty");
        shards[empty].push(moved);
    }

    Ok(PartitionPlan {
        shards,
        alpha: Some(alpha),
    })
}

/// Draws `min(b, shard.len())` distinct rows from the shard. Successive
/// calls on the same generator give the client's batch sequence for one
/// round.
pub fn sample_batch(
    data: &DatasetHandle,
    shard: &[usize],
    b: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    if shard.is_empty() {
        return Err(Error::Empty("shard"));
    }
    if b == 0 {
        return Err(Error::invalid_argument("b", "must be >= 1"));
    }
    let take = b.min(shard.len());
    let mut pool = shard.to_vec();
    for k in 0..take {
        let j = rng.random_range(k..pool.len());
        pool.swap(k, j);
    }
    data.batch_of(&pool[..take])
}

fn shuffle(indices: &mut [usize], rng: &mut ChaCha8Rng) {
    for k in (1..indices.len()).rev() {
        let j = rng.random_range(0..=k);
        indices.swap(k, j);
    }
}
