//! CIFAR-10 binary batches: `data_batch_1.bin` .. `data_batch_5.bin` and
//! `test_batch.bin`, each a sequence of 3073-byte records (label byte, then
//! 1024 red, 1024 green, 1024 blue pixels). Pixels are scaled to `[0, 1]` and
//! standardized per channel.

use std::path::Path;

use super::{Dataset, Split};
use crate::error::{Error, Result};

pub const CIFAR_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];

const RECORD: usize = 3073;
const PLANE: usize = 1024;

pub fn parse_cifar_records(bytes: &[u8], images: &mut Vec<f32>, labels: &mut Vec<usize>) -> Result<()> {
    if !bytes.len().is_multiple_of(RECORD) {
        return Err(Error::Format(format!(
            "CIFAR batch of {} bytes is not a whole number of {RECORD}-byte records",
            bytes.len()
        )));
    }
    for rec in bytes.chunks_exact(RECORD) {
        let l = rec[0] as usize;
        if l >= 10 {
            return Err(Error::Format(format!("label {l} out of range 0..10")));
        }
        labels.push(l);
        for (i, &p) in rec[1..].iter().enumerate() {
            let c = i / PLANE;
            images.push((f32::from(p) / 255.0 - CIFAR_MEAN[c]) / CIFAR_STD[c]);
        }
    }
    Ok(())
}

fn read(dir: &Path, name: &str) -> Result<Vec<u8>> {
    let p = dir.join(name);
    if !p.exists() {
        return Err(Error::MissingFile(p));
    }
    Ok(std::fs::read(p)?)
}

/// Indices of a class-stratified subset holding `fraction` of the samples:
/// equal per-class quotas (the remainder going to the lowest classes), filled
/// with each class's first occurrences in file order.
pub fn stratified_subset(labels: &[usize], classes: usize, fraction: f64) -> Vec<usize> {
    let total = (labels.len() as f64 * fraction).round() as usize;
    let mut quota: Vec<usize> = (0..classes).map(|c| total / classes + usize::from(c < total % classes)).collect();
    let mut idx = Vec::with_capacity(total);
    for (i, &l) in labels.iter().enumerate() {
        if quota[l] > 0 {
            quota[l] -= 1;
            idx.push(i);
        }
    }
    idx
}

/// `subset_fraction` in `(0, 1]` is applied to both splits.
pub fn load_cifar10(dir: &Path, subset_fraction: f64) -> Result<(Dataset, Dataset)> {
    if !(subset_fraction > 0.0 && subset_fraction <= 1.0) {
        return Err(Error::Config(format!("subset_fraction must be in (0, 1], got {subset_fraction}")));
    }
    let load = |names: &[String], split| -> Result<Dataset> {
        let (mut images, mut labels) = (Vec::new(), Vec::new());
        for n in names {
            parse_cifar_records(&read(dir, n)?, &mut images, &mut labels)?;
        }
        let d = Dataset::new([3, 32, 32], 10, split, images, labels)?;
        Ok(if subset_fraction < 1.0 { d.select(&stratified_subset(&d.labels, 10, subset_fraction)) } else { d })
    };
    let train: Vec<String> = (1..=5).map(|i| format!("data_batch_{i}.bin")).collect();
    Ok((load(&train, Split::Train)?, load(&["test_batch.bin".to_string()], Split::Test)?))
}
