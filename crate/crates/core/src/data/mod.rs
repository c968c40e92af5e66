//! Labelled image sets: the CIFAR-10 binary format and a synthetic stand-in.

mod cifar;
mod synthetic;

pub use cifar::{load_cifar10, parse_records, subset_indices, Split, DATA_ENV, IMAGE_BYTES, RECORD_BYTES};
pub use synthetic::SyntheticSpec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Images `[N, C, H, W]` with pixels in `[0, 1]` and their class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.rank() != 4 || images.batch() != labels.len() {
            return Err(Error::Shape(format!(
                "{} labels for images {:?}",
                labels.len(),
                images.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Format(format!("label {bad} outside {classes} classes")));
        }
        Ok(Self {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(channels, size)` of the square images.
    pub fn image_dims(&self) -> (usize, usize) {
        (self.images.dim(1), self.images.dim(2))
    }

    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        (
            self.images.gather(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let (images, labels) = self.batch(indices);
        Self {
            images,
            labels,
            classes: self.classes,
        }
    }

    /// The first `n` samples (all of them if `n` exceeds the size).
    pub fn take(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }
}
