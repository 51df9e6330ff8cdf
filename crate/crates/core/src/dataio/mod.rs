//! Datasets and checkpoints.

mod checkpoint;
mod cifar;
mod mnist;
mod synthetic;

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Provenance, CHECKPOINT_VERSION};
pub use cifar::{load_cifar10, parse_cifar_records, stratified_subset, CIFAR_MEAN, CIFAR_STD};
pub use mnist::{load_mnist, parse_idx_images, parse_idx_labels, MNIST_MEAN, MNIST_STD};
pub use synthetic::synthetic;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Normalized images with class labels, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[channels, height, width]` of one image.
    pub shape: [usize; 3],
    pub classes: usize,
    pub split: Split,
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(shape: [usize; 3], classes: usize, split: Split, images: Vec<f32>, labels: Vec<usize>) -> Result<Self> {
        let per = shape.iter().product::<usize>();
        if images.len() != per * labels.len() {
            return Err(Error::Format(format!(
                "{} image values for {} labels of shape {shape:?}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Format(format!("label {l} out of range 0..{classes}")));
        }
        Ok(Self { shape, classes, split, images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn image_len(&self) -> usize {
        self.shape.iter().product()
    }

    /// Images at `idx` as an `(n, c, h, w)` tensor, and their labels.
    pub fn batch<T: Real>(&self, idx: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let per = self.image_len();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend(self.images[i * per..(i + 1) * per].iter().map(|&v| T::from_f64(f64::from(v))));
        }
        let [c, h, w] = self.shape;
        let t = Tensor::new([idx.len(), c, h, w], data).expect("batch shape");
        (t, idx.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        let per = self.image_len();
        let mut images = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            images.extend_from_slice(&self.images[i * per..(i + 1) * per]);
        }
        Self {
            shape: self.shape,
            classes: self.classes,
            split: self.split,
            images,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// `n` samples at evenly spaced positions; the whole set when `n >= len`.
    pub fn evenly_spaced(&self, n: usize) -> Self {
        if n >= self.len() {
            return self.clone();
        }
        let idx: Vec<usize> = (0..n).map(|i| i * self.len() / n).collect();
        self.select(&idx)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

/// Reads `path`, or `path.gz` decompressed when only that exists.
pub(crate) fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    if path.exists() {
        return Ok(std::fs::read(path)?);
    }
    let mut gz = path.as_os_str().to_owned();
    gz.push(".gz");
    let gz = Path::new(&gz);
    if !gz.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut out = Vec::new();
    flate2::read::GzDecoder::new(std::fs::File::open(gz)?).read_to_end(&mut out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn evenly_spaced_subset() {
        let d =
            Dataset::new([1, 1, 1], 10, Split::Test, (0..10).map(|v| v as f32).collect(), (0..10).collect()).unwrap();
        let s = d.evenly_spaced(5);
        assert_eq!(s.labels, vec![0, 2, 4, 6, 8]);
        assert_eq!(d.evenly_spaced(50).len(), 10);
    }

    #[test]
    fn rejects_out_of_range_label() {
        assert!(Dataset::new([1, 1, 1], 2, Split::Train, vec![0.0], vec![2]).is_err());
    }
}
