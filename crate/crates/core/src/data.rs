//! Labeled datasets and client partitioning.
//!
//! MNIST is read from the IDX binary format; the synthetic generator draws
//! clamped Gaussian blobs around fixed per-class centers and is the default
//! desk-scale stand-in.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic number {found:#010x} in {path} (expected {expected:#010x})")]
    BadMagic { path: String, found: u32, expected: u32 },
    #[error("truncated payload in {path}: expected {expected} bytes, found {found}")]
    Truncated { path: String, expected: usize, found: usize },
    #[error("image/label count mismatch: {images} images, {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} at index {index} exceeds class count {num_classes}")]
    LabelOutOfRange { index: usize, label: usize, num_classes: usize },
    #[error("too many clients: {clients} clients for {samples} samples")]
    TooManyClients { clients: usize, samples: usize },
    #[error("invalid dataset parameters: {0}")]
    Invalid(String),
}

/// Features are stored row-major, one sample per row, values in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    feature_dim: usize,
    num_classes: usize,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        labels: Vec<usize>,
        feature_dim: usize,
        num_classes: usize,
    ) -> Result<Self, DataError> {
        if feature_dim == 0 || num_classes == 0 {
            return Err(DataError::Invalid("feature_dim and num_classes must be positive".into()));
        }
        if features.len() != labels.len() * feature_dim {
            return Err(DataError::CountMismatch {
                images: features.len() / feature_dim,
                labels: labels.len(),
            });
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(DataError::LabelOutOfRange {
                index,
                label,
                num_classes,
            });
        }
        Ok(Self {
            features,
            labels,
            feature_dim,
            num_classes,
        })
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

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn sample(&self, index: usize) -> &[f64] {
        &self.features[index * self.feature_dim..(index + 1) * self.feature_dim]
    }

    /// Gathers the given rows into a contiguous feature buffer and label list.
    pub fn gather(&self, indices: &[usize]) -> (Vec<f64>, Vec<usize>) {
        let mut feats = Vec::with_capacity(indices.len() * self.feature_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            feats.extend_from_slice(self.sample(i));
            labels.push(self.labels[i]);
        }
        (feats, labels)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32, DataError> {
    let slice = bytes.get(offset..offset + 4).ok_or_else(|| DataError::Truncated {
        path: path.display().to_string(),
        expected: offset + 4,
        found: bytes.len(),
    })?;
    Ok(u32::from_be_bytes([slice[0], slice[1], slice[2], slice[3]]))
}

/// Parses an IDX image file: magic, count, rows, cols, then `u8` pixels.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<f64>), DataError> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            path: path.display().to_string(),
            found: magic,
            expected: IDX_IMAGES_MAGIC,
        });
    }
    let count = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let dim = rows * cols;
    let expected = 16 + count * dim;
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            path: path.display().to_string(),
            expected,
            found: bytes.len(),
        });
    }
    let pixels = bytes[16..expected].iter().map(|&b| b as f64 / 255.0).collect();
    Ok((count, dim, pixels))
}

/// Parses an IDX label file: magic, count, then `u8` labels.
pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>, DataError> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic {
            path: path.display().to_string(),
            found: magic,
            expected: IDX_LABELS_MAGIC,
        });
    }
    let count = be_u32(bytes, 4, path)? as usize;
    let expected = 8 + count;
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            path: path.display().to_string(),
            expected,
            found: bytes.len(),
        });
    }
    Ok(bytes[8..expected].iter().map(|&b| b as usize).collect())
}

/// Loads an MNIST-style image/label file pair. Labels are assumed to be
/// digits, so the class count is 10.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    let (count, dim, pixels) = parse_idx_images(&read_file(images_path)?, images_path)?;
    let labels = parse_idx_labels(&read_file(labels_path)?, labels_path)?;
    if labels.len() != count {
        return Err(DataError::CountMismatch {
            images: count,
            labels: labels.len(),
        });
    }
    Dataset::new(pixels, labels, dim, 10)
}

/// Synthetic blobs: class `c` is N(center_c, spread²·I) clamped to [0,1].
///
/// Centers are drawn uniformly from [0.2, 0.8]^dim with a stream derived
/// from `seed`; samples are ordered class by class.
pub fn synth_dataset(
    num_classes: usize,
    per_class: usize,
    feature_dim: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset, DataError> {
    if num_classes == 0 || per_class == 0 || feature_dim == 0 {
        return Err(DataError::Invalid("all counts must be positive".into()));
    }
    if !(spread >= 0.0) || !spread.is_finite() {
        return Err(DataError::Invalid(format!("spread must be non-negative, got {spread}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..feature_dim).map(|_| rng.gen_range(0.2..0.8)).collect())
        .collect();
    let mut features = Vec::with_capacity(num_classes * per_class * feature_dim);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    for (class, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            for &c in center {
                let v = c + spread * noise.sample(&mut rng);
                features.push(v.clamp(0.0, 1.0));
            }
            labels.push(class);
        }
    }
    Dataset::new(features, labels, feature_dim, num_classes)
}

/// Disjoint sample-index shards, one per client.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub shards: Vec<Vec<usize>>,
}

impl Partition {
    pub fn num_clients(&self) -> usize {
        self.shards.len()
    }

    /// Distinct labels present in each shard.
    pub fn classes_per_shard(&self, ds: &Dataset) -> Vec<usize> {
        self.shards
            .iter()
            .map(|s| {
                let mut seen = vec![false; ds.num_classes()];
                s.iter().for_each(|&i| seen[ds.labels()[i]] = true);
                seen.iter().filter(|&&b| b).count()
            })
            .collect()
    }
}

/// Splits `order` into `n` contiguous shards whose sizes differ by at most
/// one; the remainder goes to the lowest-index clients.
fn contiguous_shards(order: &[usize], n: usize) -> Vec<Vec<usize>> {
    let base = order.len() / n;
    let extra = order.len() % n;
    let mut shards = Vec::with_capacity(n);
    let mut start = 0;
    for client in 0..n {
        let size = base + usize::from(client < extra);
        shards.push(order[start..start + size].to_vec());
        start += size;
    }
    shards
}

fn check_clients(ds: &Dataset, n_clients: usize) -> Result<(), DataError> {
    if n_clients == 0 || n_clients > ds.len() {
        return Err(DataError::TooManyClients {
            clients: n_clients,
            samples: ds.len(),
        });
    }
    Ok(())
}

/// Random permutation split into near-equal shards.
pub fn partition_iid(ds: &Dataset, n_clients: usize, seed: u64) -> Result<Partition, DataError> {
    check_clients(ds, n_clients)?;
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(Partition {
        shards: contiguous_shards(&order, n_clients),
    })
}

/// Stable sort by label, then contiguous near-equal shards.
pub fn partition_sorted(ds: &Dataset, n_clients: usize) -> Result<Partition, DataError> {
    check_clients(ds, n_clients)?;
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.sort_by_key(|&i| ds.labels()[i]);
    Ok(Partition {
        shards: contiguous_shards(&order, n_clients),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn idx_images(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        b.extend_from_slice(&count.to_be_bytes());
        b.extend_from_slice(&rows.to_be_bytes());
        b.extend_from_slice(&cols.to_be_bytes());
        b.extend_from_slice(pixels);
        b
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    #[test]
    fn idx_round_trip_and_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lbl = dir.path().join("lbl");
        fs::write(&img, idx_images(2, 1, 2, &[0, 255, 51, 102])).unwrap();
        fs::write(&lbl, idx_labels(&[3, 7])).unwrap();
        let ds = load_idx(&img, &lbl).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.feature_dim(), 2);
        assert_eq!(ds.sample(0), &[0.0, 1.0]);
        assert_eq!(ds.labels(), &[3, 7]);
    }

    #[test]
    fn idx_magic_numbers() {
        let p = Path::new("mem");
        assert!(parse_idx_images(&idx_images(0, 1, 1, &[]), p).is_ok());
        assert!(parse_idx_labels(&idx_labels(&[]), p).is_ok());
        // swapped magics are rejected
        assert!(matches!(
            parse_idx_images(&idx_labels(&[]), p),
            Err(DataError::BadMagic { found: 0x801, .. })
        ));
        let mut bad = idx_images(0, 1, 1, &[]);
        bad[3] = 0x04;
        assert!(matches!(parse_idx_images(&bad, p), Err(DataError::BadMagic { .. })));
    }

    #[test]
    fn idx_truncated_after_header() {
        let p = Path::new("mem");
        let header_only = idx_images(5, 28, 28, &[]);
        assert!(matches!(parse_idx_images(&header_only, p), Err(DataError::Truncated { .. })));
        let mut labels = idx_labels(&[1, 2, 3]);
        labels.truncate(9);
        assert!(matches!(parse_idx_labels(&labels, p), Err(DataError::Truncated { .. })));
    }

    #[test]
    fn idx_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lbl = dir.path().join("lbl");
        fs::write(&img, idx_images(2, 1, 1, &[1, 2])).unwrap();
        fs::write(&lbl, idx_labels(&[1, 2, 3])).unwrap();
        assert!(matches!(load_idx(&img, &lbl), Err(DataError::CountMismatch { .. })));
    }

    #[test]
    fn zero_spread_collapses_to_centers() {
        let ds = synth_dataset(3, 5, 4, 0.0, 9).unwrap();
        for class in 0..3 {
            let first = ds.sample(class * 5).to_vec();
            for i in 0..5 {
                assert_eq!(ds.sample(class * 5 + i), first.as_slice());
            }
        }
    }

    #[test]
    fn synth_is_seed_deterministic() {
        let a = synth_dataset(10, 20, 8, 0.1, 42).unwrap();
        let b = synth_dataset(10, 20, 8, 0.1, 42).unwrap();
        let c = synth_dataset(10, 20, 8, 0.1, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.features().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn iid_pigeonhole_and_identity() {
        let ds = synth_dataset(10, 10, 2, 0.1, 1).unwrap();
        let p = partition_iid(&ds, 100, 3).unwrap();
        assert!(p.shards.iter().all(|s| s.len() == 1));
        let one = partition_iid(&ds, 1, 3).unwrap();
        let mut all = one.shards[0].clone();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert!(matches!(partition_iid(&ds, 101, 3), Err(DataError::TooManyClients { .. })));
    }

    #[test]
    fn sorted_hand_case() {
        let ds = Dataset::new(vec![0.0; 4], vec![0, 0, 1, 1], 1, 2).unwrap();
        let p = partition_sorted(&ds, 2).unwrap();
        assert_eq!(p.shards, vec![vec![0, 1], vec![2, 3]]);
        assert_eq!(p.classes_per_shard(&ds), vec![1, 1]);
        let one = partition_sorted(&ds, 1).unwrap();
        assert_eq!(one.classes_per_shard(&ds), vec![2]);
    }

    #[test]
    fn sorted_mnist_shaped_has_at_most_two_classes() {
        let ds = synth_dataset(10, 600, 2, 0.1, 5).unwrap();
        let p = partition_sorted(&ds, 100).unwrap();
        assert!(p.classes_per_shard(&ds).iter().all(|&c| c <= 2));
        let one = partition_sorted(&ds, 1).unwrap();
        assert_eq!(one.classes_per_shard(&ds), vec![10]);
    }

    #[test]
    fn remainder_goes_to_low_clients() {
        let ds = synth_dataset(1, 10, 1, 0.0, 0).unwrap();
        let p = partition_sorted(&ds, 3).unwrap();
        let sizes: Vec<usize> = p.shards.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![4, 3, 3]);
    }

    fn is_exact_cover(p: &Partition, n: usize) -> bool {
        let mut seen = vec![false; n];
        for s in &p.shards {
            if s.is_empty() {
                return false;
            }
            for &i in s {
                if seen[i] {
                    return false;
                }
                seen[i] = true;
            }
        }
        seen.into_iter().all(|b| b)
    }

    proptest! {
        #[test]
        fn partitions_are_exact_covers(
            classes in 1usize..12,
            per_class in 1usize..30,
            frac in 0.01f64..1.0,
            seed in any::<u64>(),
        ) {
            let ds = synth_dataset(classes, per_class, 1, 0.1, seed).unwrap();
            let n = ((ds.len() as f64 * frac).ceil() as usize).clamp(1, ds.len());
            let iid = partition_iid(&ds, n, seed).unwrap();
            let sorted = partition_sorted(&ds, n).unwrap();
            prop_assert!(is_exact_cover(&iid, ds.len()));
            prop_assert!(is_exact_cover(&sorted, ds.len()));
            let sizes: Vec<usize> = iid.shards.iter().map(Vec::len).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            if n >= classes {
                prop_assert!(sorted.classes_per_shard(&ds).iter().all(|&c| c <= 2));
            }
        }
    }
}
