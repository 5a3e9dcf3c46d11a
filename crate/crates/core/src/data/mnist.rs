//! MNIST IDX files: big-endian u32 headers (magic, count[, rows, cols])
//! followed by raw unsigned bytes.

use super::Dataset;
use crate::error::{Error, Result};

pub const MNIST_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const MNIST_LABEL_MAGIC: u32 = 0x0000_0801;
const CLASSES: usize = 10;

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::parse("mnist", None, format!("truncated header: missing {what}")))
}

pub fn parse_mnist_idx(image_bytes: &[u8], label_bytes: &[u8]) -> Result<Dataset> {
    let magic = be_u32(image_bytes, 0, "image magic")?;
    if magic != MNIST_IMAGE_MAGIC {
        return Err(Error::parse(
            "mnist",
            None,
            format!("image magic {magic:#010x}, expected {MNIST_IMAGE_MAGIC:#010x}"),
        ));
    }
    let count = be_u32(image_bytes, 4, "image count")? as usize;
    let rows = be_u32(image_bytes, 8, "row count")? as usize;
    let cols = be_u32(image_bytes, 12, "column count")? as usize;

    let magic = be_u32(label_bytes, 0, "label magic")?;
    if magic != MNIST_LABEL_MAGIC {
        return Err(Error::parse(
            "mnist",
            None,
            format!("label magic {magic:#010x}, expected {MNIST_LABEL_MAGIC:#010x}"),
        ));
    }
    let label_count = be_u32(label_bytes, 4, "label count")? as usize;
    if label_count != count {
        return Err(Error::parse(
            "mnist",
            None,
            format!("{count} images but {label_count} labels"),
        ));
    }

    let pixels = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::parse("mnist", None, "image dimensions overflow"))?;
    if image_bytes.len() - 16 != pixels {
        return Err(Error::parse(
            "mnist",
            None,
            format!(
                "image payload is {} bytes, header implies {pixels}",
                image_bytes.len() - 16
            ),
        ));
    }
    if label_bytes.len() - 8 != count {
        return Err(Error::parse(
            "mnist",
            None,
            format!(
                "label payload is {} bytes, header implies {count}",
                label_bytes.len() - 8
            ),
        ));
    }
    let mut labels = Vec::with_capacity(count);
    for (i, &b) in label_bytes[8..].iter().enumerate() {
        if b as usize >= CLASSES {
            return Err(Error::parse("mnist", Some(i), format!("label {b} > 9")));
        }
        labels.push(b as usize);
    }
    let images = image_bytes[16..]
        .iter()
        .map(|&b| b as f32 / 255.0)
        .collect();
    Dataset::new("mnist", [1, rows, cols], images, labels, CLASSES)
}

/// Inverse of [`parse_mnist_idx`]: `(image file, label file)`.
pub fn encode_mnist_idx(ds: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let [c, rows, cols] = ds.sample_shape();
    if c != 1 || ds.class_count() > CLASSES {
        return Err(Error::InvalidArgument("dataset is not MNIST shaped".into()));
    }
    let mut images = Vec::with_capacity(16 + ds.images().len());
    for v in [MNIST_IMAGE_MAGIC, ds.len() as u32, rows as u32, cols as u32] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    images.extend(
        ds.images()
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    let mut labels = Vec::with_capacity(8 + ds.len());
    labels.extend_from_slice(&MNIST_LABEL_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    labels.extend(ds.labels().iter().map(|&y| y as u8));
    Ok((images, labels))
}
