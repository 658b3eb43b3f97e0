//! MNIST IDX ingestion and synthetic datasets.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use precond_core::linalg::Matrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

pub const IMAGES_MAGIC: u32 = 2051;
pub const LABELS_MAGIC: u32 = 2049;
pub const MNIST_TRAIN: usize = 49_152;
pub const MNIST_VALIDATION: usize = 10_848;
pub const MNIST_TEST: usize = 10_000;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: magic {found}, expected {expected}")]
    BadMagic { path: PathBuf, found: u32, expected: u32 },
    #[error("{path}: file ends after {len} bytes, header promises {needed}")]
    TruncatedFile { path: PathBuf, len: usize, needed: usize },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("{0} images is fewer than the {1} needed for the split")]
    TooFewExamples(usize, usize),
}

/// Inputs and class labels; row `i` of `inputs` belongs to `labels[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| m + 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Split,
    pub validation: Split,
    pub test: Split,
}

impl DatasetSplit {
    pub fn classes(&self) -> usize {
        self.train
            .classes()
            .max(self.validation.classes())
            .max(self.test.classes())
    }
}

fn read(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.to_owned(),
        source,
    })
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("four bytes"))
}

fn header(path: &Path, bytes: &[u8], words: usize, magic: u32) -> Result<Vec<u32>, DataError> {
    let truncated = |needed| DataError::TruncatedFile {
        path: path.to_owned(),
        len: bytes.len(),
        needed,
    };
    if bytes.len() < 4 * words {
        return Err(truncated(4 * words));
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(DataError::BadMagic {
            path: path.to_owned(),
            found,
            expected: magic,
        });
    }
    Ok((1..words).map(|w| be_u32(bytes, 4 * w)).collect())
}

/// Parses an IDX image file and its label file. Pixels are scaled to [0, 1]
/// and each image is flattened row-major into one row.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Split, DataError> {
    let images = read(images_path)?;
    let dims = header(images_path, &images, 4, IMAGES_MAGIC)?;
    let (count, pixels) = (dims[0] as usize, dims[1] as usize * dims[2] as usize);
    let needed = 16 + count * pixels;
    if images.len() < needed {
        return Err(DataError::TruncatedFile {
            path: images_path.to_owned(),
            len: images.len(),
            needed,
        });
    }

    let labels = read(labels_path)?;
    let label_count = header(labels_path, &labels, 2, LABELS_MAGIC)?[0] as usize;
    if labels.len() < 8 + label_count {
        return Err(DataError::TruncatedFile {
            path: labels_path.to_owned(),
            len: labels.len(),
            needed: 8 + label_count,
        });
    }
    if label_count != count {
        return Err(DataError::CountMismatch {
            images: count,
            labels: label_count,
        });
    }

    let data = images[16..needed].iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok(Split {
        inputs: Matrix::from_vec(count, pixels, data),
        labels: labels[8..8 + label_count].iter().map(|&b| usize::from(b)).collect(),
    })
}

fn take_rows(split: &Split, range: std::ops::Range<usize>) -> Split {
    let cols = split.dim();
    Split {
        inputs: Matrix::from_vec(
            range.len(),
            cols,
            split.inputs.as_slice()[range.start * cols..range.end * cols].to_vec(),
        ),
        labels: split.labels[range].to_vec(),
    }
}

/// Loads the four IDX files from `dir`. The first 49152 training images are
/// used for training and the next 10848 for validation.
pub fn load_mnist(dir: &Path) -> Result<DatasetSplit, DataError> {
    let full = load_mnist_idx(&dir.join(TRAIN_IMAGES), &dir.join(TRAIN_LABELS))?;
    let needed = MNIST_TRAIN + MNIST_VALIDATION;
    if full.len() < needed {
        return Err(DataError::TooFewExamples(full.len(), needed));
    }
    let test = load_mnist_idx(&dir.join(TEST_IMAGES), &dir.join(TEST_LABELS))?;
    Ok(DatasetSplit {
        train: take_rows(&full, 0..MNIST_TRAIN),
        validation: take_rows(&full, MNIST_TRAIN..needed),
        test,
    })
}

/// Gaussian clusters with identity covariance. Classes come in pairs
/// centred at `±separation · e_j` with `j = (c / 2) mod dim`, so two classes
/// in two dimensions sit at `±separation · e₁`. Each split holds `per_class`
/// examples per class in shuffled order.
pub fn synthetic_blobs(classes: usize, dim: usize, per_class: usize, separation: f64, seed: u64) -> DatasetSplit {
    assert!(classes >= 2, "synthetic_blobs needs at least two classes");
    assert!(dim >= 1, "synthetic_blobs needs at least one dimension");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mean = |c: usize| {
        let mut m = vec![0.0; dim];
        let sign = if c.is_multiple_of(2) { 1.0 } else { -1.0 };
        m[(c / 2) % dim] = sign * separation;
        m
    };
    let means: Vec<Vec<f64>> = (0..classes).map(mean).collect();
    let draw = |rng: &mut ChaCha8Rng| {
        let mut order: Vec<usize> = (0..classes * per_class).map(|i| i % classes).collect();
        order.shuffle(rng);
        let mut data = Vec::with_capacity(order.len() * dim);
        for &c in &order {
            for &m in &means[c] {
                let z: f64 = StandardNormal.sample(rng);
                data.push(m + z);
            }
        }
        Split {
            inputs: Matrix::from_vec(order.len(), dim, data),
            labels: order,
        }
    };
    DatasetSplit {
        train: draw(&mut rng),
        validation: draw(&mut rng),
        test: draw(&mut rng),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for w in [IMAGES_MAGIC, count, rows, cols] {
            b.extend_from_slice(&w.to_be_bytes());
        }
        b.extend_from_slice(pixels);
        b
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
        b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    fn write(dir: &Path, name: &str, bytes: &[u8]) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, bytes).unwrap();
        p
    }

    #[test]
    fn crafted_fixture_parses() {
        let dir = tempfile::tempdir().unwrap();
        let mut pixels = vec![0u8; 2 * 784];
        pixels[0] = 255;
        pixels[784 + 783] = 51;
        let img = write(dir.path(), "img", &idx_images(2, 28, 28, &pixels));
        let lab = write(dir.path(), "lab", &idx_labels(&[7, 3]));
        let split = load_mnist_idx(&img, &lab).unwrap();
        assert_eq!(split.inputs.shape(), (2, 784));
        assert_eq!(split.labels, vec![7, 3]);
        assert_eq!(split.inputs[(0, 0)], 1.0);
        assert_eq!(split.inputs[(1, 783)], 0.2);
        assert_eq!(split.inputs[(1, 0)], 0.0);
    }

    #[test]
    fn malformed_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let lab = write(dir.path(), "lab", &idx_labels(&[1, 2]));

        let mut bad = idx_images(2, 2, 2, &[0; 8]);
        bad[3] = 0x04; // 2052
        let img = write(dir.path(), "bad", &bad);
        assert!(matches!(
            load_mnist_idx(&img, &lab),
            Err(DataError::BadMagic { found: 2052, .. })
        ));

        let img = write(dir.path(), "short", &idx_images(2, 2, 2, &[0; 7]));
        assert!(matches!(
            load_mnist_idx(&img, &lab),
            Err(DataError::TruncatedFile { needed: 24, .. })
        ));
        let img = write(dir.path(), "header", &[0, 0, 8, 3]);
        assert!(matches!(
            load_mnist_idx(&img, &lab),
            Err(DataError::TruncatedFile { .. })
        ));

        let img = write(dir.path(), "three", &idx_images(3, 2, 2, &[0; 12]));
        assert!(matches!(
            load_mnist_idx(&img, &lab),
            Err(DataError::CountMismatch { images: 3, labels: 2 })
        ));

        let missing = dir.path().join("missing");
        assert!(matches!(load_mnist_idx(&missing, &lab), Err(DataError::Io { .. })));
    }

    #[test]
    fn blobs_are_deterministic_and_balanced() {
        let a = synthetic_blobs(3, 4, 20, 3.0, 9);
        assert_eq!(a, synthetic_blobs(3, 4, 20, 3.0, 9));
        assert_ne!(a.train, synthetic_blobs(3, 4, 20, 3.0, 10).train);
        assert_eq!(a.train.inputs.shape(), (60, 4));
        assert_eq!(a.classes(), 3);
        for c in 0..3 {
            assert_eq!(a.train.labels.iter().filter(|&&l| l == c).count(), 20);
        }
    }

    #[test]
    fn two_blob_bayes_accuracy() {
        // Means ±2e₁ with unit variance: the Bayes rule sign(x₁) is right
        // with probability Φ(2) ≈ 0.9772.
        let d = synthetic_blobs(2, 2, 5000, 2.0, 1);
        let test = &d.test;
        let correct = (0..test.len())
            .filter(|&i| usize::from(test.inputs[(i, 0)] < 0.0) == test.labels[i])
            .count();
        let acc = correct as f64 / test.len() as f64;
        assert!(acc > 0.97 && acc < 0.985, "{acc}");
    }
}
