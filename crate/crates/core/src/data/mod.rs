//! Datasets, parsers for the CIFAR-10 and MNIST binary formats, synthetic
//! data, mixup, and deterministic batching.

mod augment;
mod batch;
mod cifar;
mod mnist;
mod synthetic;

pub use augment::{mixup, mixup_with, sample_mixup_lambda};
pub use batch::batch_indices;
pub use cifar::{encode_cifar10_binary, parse_cifar10_binary, CIFAR10_RECORD_LEN};
pub use mnist::{encode_mnist_idx, parse_mnist_idx, MNIST_IMAGE_MAGIC, MNIST_LABEL_MAGIC};
pub use synthetic::{synthetic_blobs, synthetic_blobs_with_noise, DEFAULT_BLOB_NOISE};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Labelled images with pixel values in `[0, 1]`, stored sample-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    name: String,
    sample_shape: [usize; 3],
    images: Vec<f32>,
    labels: Vec<usize>,
    class_count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Tensor<f32>,
    pub hard_labels: Vec<usize>,
    pub soft_labels: Option<Tensor<f32>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.hard_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hard_labels.is_empty()
    }
}

/// Per-channel input normalization `(x − mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl NormStats {
    pub fn identity(channels: usize) -> Self {
        NormStats {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        sample_shape: [usize; 3],
        images: Vec<f32>,
        labels: Vec<usize>,
        class_count: usize,
    ) -> Result<Self> {
        let per: usize = sample_shape.iter().product();
        if images.len() != per * labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} pixel values for {} samples of shape {sample_shape:?}",
                images.len(),
                labels.len()
            )));
        }
        if let Some((i, y)) = labels.iter().enumerate().find(|(_, &y)| y >= class_count) {
            return Err(Error::InvalidArgument(format!(
                "sample {i} has label {y} ≥ class count {class_count}"
            )));
        }
        if let Some(v) = images.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "pixel value {v} outside [0, 1]"
            )));
        }
        Ok(Dataset {
            name: name.into(),
            sample_shape,
            images,
            labels,
            class_count,
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

    pub fn sample_shape(&self) -> [usize; 3] {
        self.sample_shape
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &[f32] {
        &self.images
    }

    fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let per = self.sample_len();
        &self.images[i * per..(i + 1) * per]
    }

    /// Gathers the given samples into a batch, in the given order.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let per = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let [c, h, w] = self.sample_shape;
        Batch {
            inputs: Tensor::new(vec![indices.len(), c, h, w], data).expect("batch shape"),
            hard_labels: indices.iter().map(|&i| self.labels[i]).collect(),
            soft_labels: None,
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let b = self.batch(indices);
        Dataset {
            name: self.name.clone(),
            sample_shape: self.sample_shape,
            images: b.inputs.into_data(),
            labels: b.hard_labels,
            class_count: self.class_count,
        }
    }

    /// First `n` samples (or all, if fewer).
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn concat(parts: &[Dataset]) -> Result<Dataset> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("no datasets to concatenate".into()))?;
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if p.sample_shape != first.sample_shape || p.class_count != first.class_count {
                return Err(Error::InvalidArgument(
                    "datasets disagree on sample shape or class count".into(),
                ));
            }
            images.extend_from_slice(&p.images);
            labels.extend_from_slice(&p.labels);
        }
        Dataset::new(
            first.name.clone(),
            first.sample_shape,
            images,
            labels,
            first.class_count,
        )
    }

    /// Deterministically holds out `ceil(fraction · n)` samples. Returns
    /// `(train, validation)`; both keep the original sample order.
    pub fn split_validation(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::InvalidArgument(format!(
                "validation fraction {fraction} outside [0, 1)"
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let held = ((self.len() as f64) * fraction).ceil() as usize;
        let (val, train) = idx.split_at(held.min(self.len()));
        let (mut val, mut train) = (val.to_vec(), train.to_vec());
        val.sort_unstable();
        train.sort_unstable();
        Ok((self.subset(&train), self.subset(&val)))
    }

    /// Per-channel mean and standard deviation over every pixel.
    pub fn channel_stats(&self) -> NormStats {
        let [c, h, w] = self.sample_shape;
        let plane = h * w;
        let mut sum = vec![0f64; c];
        let mut sq = vec![0f64; c];
        for img in self.images.chunks(c * plane) {
            for ch in 0..c {
                for &v in &img[ch * plane..(ch + 1) * plane] {
                    sum[ch] += v as f64;
                    sq[ch] += (v as f64) * (v as f64);
                }
            }
        }
        let count = (self.len() * plane).max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let var = (s / count - m * m).max(0.0);
                if var.sqrt() < 1e-6 {
                    1.0
                } else {
                    var.sqrt() as f32
                }
            })
            .collect();
        NormStats {
            mean: mean.iter().map(|&m| m as f32).collect(),
            std,
        }
    }

    /// Shuffled batches for one pass; the last partial batch is kept.
    pub fn batches(
        &self,
        batch_size: usize,
        seed: u64,
    ) -> Result<impl Iterator<Item = Batch> + '_> {
        let order = batch_indices(self.len(), batch_size, seed)?;
        Ok(order.into_iter().map(move |idx| self.batch(&idx)))
    }

    /// Batches in storage order, for evaluation.
    pub fn sequential_batches(&self, batch_size: usize) -> impl Iterator<Item = Batch> + '_ {
        let bs = batch_size.max(1);
        (0..self.len()).step_by(bs).map(move |start| {
            let idx: Vec<usize> = (start..(start + bs).min(self.len())).collect();
            self.batch(&idx)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_labels_and_pixels() {
        assert!(Dataset::new("x", [1, 1, 1], vec![0.5], vec![3], 3).is_err());
        assert!(Dataset::new("x", [1, 1, 1], vec![1.5], vec![0], 3).is_err());
        assert!(Dataset::new("x", [1, 1, 1], vec![0.5, 0.5], vec![0], 3).is_err());
    }

    #[test]
    fn validation_split_partitions() {
        let ds = synthetic_blobs(50, 5, [1, 4, 4], 1).unwrap();
        let (train, val) = ds.split_validation(0.1, 3).unwrap();
        assert_eq!(val.len(), 5);
        assert_eq!(train.len(), 45);
        let (train2, _) = ds.split_validation(0.1, 3).unwrap();
        assert_eq!(train, train2);
    }

    #[test]
    fn channel_stats_of_constant_image() {
        let ds = Dataset::new("c", [2, 1, 2], vec![0.2, 0.2, 0.6, 0.6], vec![0], 1).unwrap();
        let s = ds.channel_stats();
        assert!((s.mean[0] - 0.2).abs() < 1e-6 && (s.mean[1] - 0.6).abs() < 1e-6);
        assert_eq!(s.std, vec![1.0, 1.0]);
    }
}
