//! CIFAR-10 binary shards: 3073-byte records of one label byte followed by
//! the R, G and B planes of a 32×32 image, each row-major.

use super::Dataset;
use crate::error::{Error, Result};

pub const CIFAR10_RECORD_LEN: usize = 1 + 3 * 32 * 32;
const CLASSES: usize = 10;

pub fn parse_cifar10_binary(bytes: &[u8]) -> Result<Dataset> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR10_RECORD_LEN) {
        return Err(Error::parse(
            "cifar10",
            None,
            format!(
                "length {} is not a positive multiple of {CIFAR10_RECORD_LEN}",
                bytes.len()
            ),
        ));
    }
    let n = bytes.len() / CIFAR10_RECORD_LEN;
    let mut labels = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n * (CIFAR10_RECORD_LEN - 1));
    for (i, record) in bytes.chunks_exact(CIFAR10_RECORD_LEN).enumerate() {
        let label = record[0] as usize;
        if label >= CLASSES {
            return Err(Error::parse(
                "cifar10",
                Some(i),
                format!("label byte {label} > 9"),
            ));
        }
        labels.push(label);
        images.extend(record[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Dataset::new("cifar10", [3, 32, 32], images, labels, CLASSES)
}

/// Inverse of [`parse_cifar10_binary`]; pixels are quantized to the nearest
/// 1/255 step.
pub fn encode_cifar10_binary(ds: &Dataset) -> Result<Vec<u8>> {
    if ds.sample_shape() != [3, 32, 32] || ds.class_count() > CLASSES {
        return Err(Error::InvalidArgument(
            "dataset is not CIFAR-10 shaped".into(),
        ));
    }
    let mut out = Vec::with_capacity(ds.len() * CIFAR10_RECORD_LEN);
    for i in 0..ds.len() {
        out.push(ds.labels()[i] as u8);
        out.extend(
            ds.image(i)
                .iter()
                .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
        );
    }
    Ok(out)
}
