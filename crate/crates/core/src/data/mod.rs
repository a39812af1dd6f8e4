//! Labeled image datasets: IDX loading and writing, the MNIST6 family of
//! derived datasets, and seeded synthetic inputs.
//!
//! MNIST6 drops the digits 0, 1, 6 and 8 (the ones that look alike under a
//! half or quarter turn) and relabels the survivors densely in ascending
//! order: 2→0, 3→1, 4→2, 5→3, 7→4, 9→5.
//!
//! The rotated variants draw one quarter-turn count per image from a
//! [`ChaCha8Rng`] seeded with the user seed, taking the top two bits of
//! `next_u32()`. Both variants consume the generator identically, so for the
//! same seed image `i` receives the same rotation in either dataset. The
//! rotation-equivariant variant encodes the label as `digit * 4 + quarters`.

pub mod idx;
mod synthetic;

use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::Tensor;
use crate::transforms::{self, Transform};

pub use idx::{IdxError, IdxImages};
pub use synthetic::{synthetic_batch, SyntheticKind};

/// Original MNIST digits kept by [`build_mnist6`], in new-label order.
pub const MNIST6_DIGITS: [u8; 6] = [2, 3, 4, 5, 7, 9];

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Idx(#[from] IdxError),
    #[error("MNIST6 needs a 10-class dataset, got {0} classes")]
    NotTenClass(usize),
    #[error("image {index} is {rows}x{cols}; rotations need square images")]
    NonSquare {
        index: usize,
        rows: usize,
        cols: usize,
    },
    #[error("image {index} has shape {shape:?}; expected [1, H, W]")]
    BadImageShape { index: usize, shape: Vec<usize> },
    #[error("{images} images but {labels} labels")]
    LengthMismatch { images: usize, labels: usize },
    #[error("label {label} at index {index} is not below class count {class_count}")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        class_count: usize,
    },
    #[error("images differ in size: {first:?} vs {other:?} at index {index}")]
    MixedSizes {
        index: usize,
        first: Vec<usize>,
        other: Vec<usize>,
    },
    #[error("{0} classes do not fit in one IDX label byte")]
    TooManyClasses(usize),
}

/// Single-channel images with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    images: Vec<Tensor>,
    labels: Vec<usize>,
    class_count: usize,
}

impl LabeledDataset {
    /// Checks that every image is `[1, H, W]` with a common size, that
    /// pixel values lie in `[0, 1]` (values outside are clipped) and that
    /// labels are below `class_count`.
    pub fn new(
        images: Vec<Tensor>,
        labels: Vec<usize>,
        class_count: usize,
    ) -> Result<Self, DataError> {
        if images.len() != labels.len() {
            return Err(DataError::LengthMismatch {
                images: images.len(),
                labels: labels.len(),
            });
        }
        let mut clipped = Vec::with_capacity(images.len());
        for (index, img) in images.into_iter().enumerate() {
            if img.rank() != 3 || img.shape()[0] != 1 {
                return Err(DataError::BadImageShape {
                    index,
                    shape: img.shape().to_vec(),
                });
            }
            if let Some(first) = clipped.first().map(|t: &Tensor| t.shape().to_vec()) {
                if img.shape() != first.as_slice() {
                    return Err(DataError::MixedSizes {
                        index,
                        first,
                        other: img.shape().to_vec(),
                    });
                }
            }
            clipped.push(img.map(|v| v.clamp(0.0, 1.0)));
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= class_count) {
            return Err(DataError::LabelOutOfRange {
                index,
                label,
                class_count,
            });
        }
        Ok(Self {
            images: clipped,
            labels,
            class_count,
        })
    }

    pub fn images(&self) -> &[Tensor] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `(rows, cols)` of the images, or `None` for an empty dataset.
    pub fn image_size(&self) -> Option<(usize, usize)> {
        self.images.first().map(|t| (t.shape()[1], t.shape()[2]))
    }

    pub fn into_images(self) -> Vec<Tensor> {
        self.images
    }

    /// Parses IDX image and label buffers. Pixels are divided by 255 and the
    /// class count is one more than the largest label.
    pub fn from_idx_bytes(images: &[u8], labels: &[u8]) -> Result<Self, DataError> {
        let raw = idx::parse_images(images)?;
        let labels = idx::parse_labels(labels)?;
        if raw.count != labels.len() {
            return Err(IdxError::CountMismatch {
                images: raw.count,
                labels: labels.len(),
            }
            .into());
        }
        let plane = raw.rows * raw.cols;
        let tensors = raw
            .pixels
            .chunks_exact(plane.max(1))
            .take(raw.count)
            .map(|px| {
                Tensor::new(
                    vec![1, raw.rows, raw.cols],
                    px.iter().map(|&b| f64::from(b) / 255.0).collect(),
                )
            })
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| DataError::BadImageShape {
                index: 0,
                shape: vec![1, raw.rows, raw.cols],
            })?;
        let class_count = labels
            .iter()
            .map(|&l| usize::from(l) + 1)
            .max()
            .unwrap_or(0);
        Self::new(
            tensors,
            labels.into_iter().map(usize::from).collect(),
            class_count,
        )
    }

    /// Encodes the dataset as IDX image and label buffers. Pixels are
    /// multiplied by 255 and rounded, which is lossless for data that came
    /// from an IDX file.
    pub fn to_idx_bytes(&self) -> Result<(Vec<u8>, Vec<u8>), DataError> {
        if self.class_count > 256 {
            return Err(DataError::TooManyClasses(self.class_count));
        }
        let (rows, cols) = self.image_size().unwrap_or((0, 0));
        let pixels = self
            .images
            .iter()
            .flat_map(|t| t.data().iter().map(|&v| (v * 255.0).round() as u8))
            .collect();
        let images = idx::encode_images(&IdxImages {
            count: self.len(),
            rows,
            cols,
            pixels,
        });
        let labels: Vec<u8> = self.labels.iter().map(|&l| l as u8).collect();
        Ok((images, idx::encode_labels(&labels)))
    }

    pub fn save_idx(&self, images_path: &Path, labels_path: &Path) -> Result<(), DataError> {
        let (images, labels) = self.to_idx_bytes()?;
        idx::write_file(images_path, &images)?;
        idx::write_file(labels_path, &labels)?;
        Ok(())
    }
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset, DataError> {
    let images = idx::read_file(images_path)?;
    let labels = idx::read_file(labels_path)?;
    LabeledDataset::from_idx_bytes(&images, &labels)
}

pub fn build_mnist6(d: &LabeledDataset) -> Result<LabeledDataset, DataError> {
    if d.class_count != 10 {
        return Err(DataError::NotTenClass(d.class_count));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (img, &label) in d.images.iter().zip(&d.labels) {
        if let Some(new) = MNIST6_DIGITS.iter().position(|&k| usize::from(k) == label) {
            images.push(img.clone());
            labels.push(new);
        }
    }
    LabeledDataset::new(images, labels, MNIST6_DIGITS.len())
}

/// The quarter-turn counts assigned to the first `n` images for `seed`.
pub fn rotation_draws(n: usize, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.next_u32() >> 30).collect()
}

fn rotate_all(d: &LabeledDataset, seed: u64) -> Result<(Vec<Tensor>, Vec<u32>), DataError> {
    for (index, img) in d.images.iter().enumerate() {
        let (rows, cols) = (img.shape()[1], img.shape()[2]);
        if rows != cols {
            return Err(DataError::NonSquare { index, rows, cols });
        }
    }
    let quarters = rotation_draws(d.len(), seed);
    let images = d
        .images
        .iter()
        .zip(&quarters)
        .map(|(img, &q)| {
            transforms::apply(&Transform::rotation(i64::from(q)), img)
                .expect("square [1, H, W] images always rotate")
        })
        .collect();
    Ok((images, quarters))
}

/// Rotates every image by a random multiple of 90°; labels are unchanged.
pub fn build_mnist6_rot_inv(d: &LabeledDataset, seed: u64) -> Result<LabeledDataset, DataError> {
    let (images, _) = rotate_all(d, seed)?;
    LabeledDataset::new(images, d.labels.clone(), d.class_count)
}

/// Rotates every image by a random multiple of 90° and folds the rotation
/// into the label as `label * 4 + quarters`.
pub fn build_mnist6_rot_eq(d: &LabeledDataset, seed: u64) -> Result<LabeledDataset, DataError> {
    let (images, quarters) = rotate_all(d, seed)?;
    let labels = d
        .labels
        .iter()
        .zip(&quarters)
        .map(|(&l, &q)| l * 4 + q as usize)
        .collect();
    LabeledDataset::new(images, labels, d.class_count * 4)
}

/// Splits a rotation-equivariant label into `(digit, quarters)`.
pub fn decode_rot_eq_label(label: usize) -> (usize, u32) {
    (label / 4, (label % 4) as u32)
}
