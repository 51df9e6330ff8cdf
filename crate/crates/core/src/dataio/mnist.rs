//! MNIST in IDX format.
//!
//! Expected files in the data directory (each optionally gzipped, with a `.gz`
//! suffix): `train-images-idx3-ubyte`, `train-labels-idx1-ubyte`,
//! `t10k-images-idx3-ubyte`, `t10k-labels-idx1-ubyte`. Pixels are scaled to
//! `[0, 1]` and standardized with `MNIST_MEAN` / `MNIST_STD`, giving values in
//! about `[-0.42, 2.82]`.

use std::path::Path;

use super::{read_maybe_gz, Dataset, Split};
use crate::error::{Error, Result};

pub const MNIST_MEAN: f32 = 0.1307;
pub const MNIST_STD: f32 = 0.3081;

const IMAGE_MAGIC: u32 = 2051;
const LABEL_MAGIC: u32 = 2049;

fn be_u32(b: &[u8], at: usize, what: &str) -> Result<u32> {
    b.get(at..at + 4)
        .map(|s| u32::from_be_bytes(s.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Format(format!("{what}: truncated header")))
}

/// Returns `(count, rows, cols, pixels)`.
pub fn parse_idx_images(b: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = be_u32(b, 0, "images")?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Format(format!("unrecognized IDX magic {magic} (expected {IMAGE_MAGIC} for images)")));
    }
    let n = be_u32(b, 4, "images")? as usize;
    let rows = be_u32(b, 8, "images")? as usize;
    let cols = be_u32(b, 12, "images")? as usize;
    let need = n * rows * cols;
    let body = &b[16..];
    if body.len() < need {
        return Err(Error::Format(format!("images: truncated file, {} of {need} pixel bytes", body.len())));
    }
    Ok((n, rows, cols, &body[..need]))
}

pub fn parse_idx_labels(b: &[u8], classes: usize) -> Result<Vec<usize>> {
    let magic = be_u32(b, 0, "labels")?;
    if magic != LABEL_MAGIC {
        return Err(Error::Format(format!("unrecognized IDX magic {magic} (expected {LABEL_MAGIC} for labels)")));
    }
    let n = be_u32(b, 4, "labels")? as usize;
    let body = &b[8..];
    if body.len() < n {
        return Err(Error::Format(format!("labels: truncated file, {} of {n} label bytes", body.len())));
    }
    body[..n]
        .iter()
        .map(|&l| {
            let l = l as usize;
            if l < classes {
                Ok(l)
            } else {
                Err(Error::Format(format!("label {l} out of range 0..{classes}")))
            }
        })
        .collect()
}

fn load_split(dir: &Path, prefix: &str, split: Split) -> Result<Dataset> {
    let img = read_maybe_gz(&dir.join(format!("{prefix}-images-idx3-ubyte")))?;
    let lab = read_maybe_gz(&dir.join(format!("{prefix}-labels-idx1-ubyte")))?;
    let (n, rows, cols, px) = parse_idx_images(&img)?;
    let labels = parse_idx_labels(&lab, 10)?;
    if labels.len() != n {
        return Err(Error::Format(format!("{prefix}: {n} images but {} labels", labels.len())));
    }
    let images = px.iter().map(|&p| (f32::from(p) / 255.0 - MNIST_MEAN) / MNIST_STD).collect();
    Dataset::new([1, rows, cols], 10, split, images, labels)
}

pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    Ok((load_split(dir, "train", Split::Train)?, load_split(dir, "t10k", Split::Test)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(magic: u32, dims: &[u32]) -> Vec<u8> {
        let mut v = magic.to_be_bytes().to_vec();
        for d in dims {
            v.extend(d.to_be_bytes());
        }
        v
    }

    #[test]
    fn wrong_magic_is_named() {
        let err = parse_idx_images(&header(2050, &[0, 28, 28])).unwrap_err().to_string();
        assert!(err.contains("unrecognized IDX magic"), "{err}");
    }

    #[test]
    fn truncated_pixels() {
        let mut b = header(IMAGE_MAGIC, &[2, 2, 2]);
        b.extend([0u8; 7]);
        assert!(parse_idx_images(&b).unwrap_err().to_string().contains("truncated"));
    }

    #[test]
    fn label_out_of_range() {
        let mut b = header(LABEL_MAGIC, &[2]);
        b.extend([3u8, 10]);
        assert!(parse_idx_labels(&b, 10).unwrap_err().to_string().contains("label 10"));
    }

    #[test]
    fn count_mismatch_between_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = header(IMAGE_MAGIC, &[2, 1, 1]);
        img.extend([0u8, 255]);
        let mut lab = header(LABEL_MAGIC, &[3]);
        lab.extend([1u8, 2, 3]);
        std::fs::write(dir.path().join("t10k-images-idx3-ubyte"), img).unwrap();
        std::fs::write(dir.path().join("t10k-labels-idx1-ubyte"), lab).unwrap();
        let err = load_split(dir.path(), "t10k", Split::Test).unwrap_err().to_string();
        assert!(err.contains("2 images but 3 labels"), "{err}");
    }
}
