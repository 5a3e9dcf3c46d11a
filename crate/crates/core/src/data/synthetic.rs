use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Dataset;
use crate::error::{Error, Result};

/// Pixel noise standard deviation used by [`synthetic_blobs`].
pub const DEFAULT_BLOB_NOISE: f64 = 0.35;

pub fn synthetic_blobs(
    n: usize,
    class_count: usize,
    shape: [usize; 3],
    seed: u64,
) -> Result<Dataset> {
    synthetic_blobs_with_noise(n, class_count, shape, seed, DEFAULT_BLOB_NOISE)
}

/// Class-conditional images: each class owns a mean pattern made of two
/// Gaussian bumps per channel, and samples add i.i.d. pixel noise before
/// clamping to `[0, 1]`. With `noise == 0` every sample equals its class mean.
///
/// The mean patterns depend only on `(class_count, shape, seed)`; labels
/// cycle through the classes.
pub fn synthetic_blobs_with_noise(
    n: usize,
    class_count: usize,
    shape: [usize; 3],
    seed: u64,
    noise: f64,
) -> Result<Dataset> {
    if class_count == 0 || n < class_count {
        return Err(Error::InvalidArgument(format!(
            "need n ≥ class_count ≥ 1, got n={n}, classes={class_count}"
        )));
    }
    if noise.is_nan() || noise < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "noise {noise} must be non-negative"
        )));
    }
    let means = class_means(class_count, shape, seed);
    let per: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_b10b);
    let normal = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("valid normal");
    let mut images = Vec::with_capacity(n * per);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % class_count;
        labels.push(y);
        for &m in &means[y * per..(y + 1) * per] {
            let v = if noise > 0.0 {
                m + normal.sample(&mut rng)
            } else {
                m
            };
            images.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    Dataset::new("synthetic", shape, images, labels, class_count)
}

fn class_means(class_count: usize, [c, h, w]: [usize; 3], seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = (h.max(w) as f64 / 6.0).max(0.5);
    let mut out = Vec::with_capacity(class_count * c * h * w);
    for _ in 0..class_count {
        for _ in 0..c {
            let bumps: Vec<(f64, f64)> = (0..2)
                .map(|_| {
                    (
                        rng.random_range(0.0..h as f64),
                        rng.random_range(0.0..w as f64),
                    )
                })
                .collect();
            for y in 0..h {
                for x in 0..w {
                    let v: f64 = bumps
                        .iter()
                        .map(|&(cy, cx)| {
                            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                            0.8 * (-d2 / (2.0 * width * width)).exp()
                        })
                        .sum();
                    out.push((0.1 + v).min(1.0));
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nearest_mean_accuracy(ds: &Dataset) -> f64 {
        let per: usize = ds.sample_shape().iter().product();
        let k = ds.class_count();
        let mut means = vec![0f64; k * per];
        let mut counts = vec![0usize; k];
        for i in 0..ds.len() {
            let y = ds.labels()[i];
            counts[y] += 1;
            for (m, &v) in means[y * per..(y + 1) * per].iter_mut().zip(ds.image(i)) {
                *m += v as f64;
            }
        }
        for y in 0..k {
            means[y * per..(y + 1) * per]
                .iter_mut()
                .for_each(|m| *m /= counts[y] as f64);
        }
        let correct = (0..ds.len())
            .filter(|&i| {
                let best = (0..k)
                    .min_by(|&a, &b| {
                        let da: f64 = means[a * per..(a + 1) * per]
                            .iter()
                            .zip(ds.image(i))
                            .map(|(m, &v)| (m - v as f64).powi(2))
                            .sum();
                        let db: f64 = means[b * per..(b + 1) * per]
                            .iter()
                            .zip(ds.image(i))
                            .map(|(m, &v)| (m - v as f64).powi(2))
                            .sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                best == ds.labels()[i]
            })
            .count();
        correct as f64 / ds.len() as f64
    }

    #[test]
    fn deterministic_per_seed() {
        let a = synthetic_blobs(40, 4, [1, 8, 8], 7).unwrap();
        let b = synthetic_blobs(40, 4, [1, 8, 8], 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synthetic_blobs(40, 4, [1, 8, 8], 8).unwrap());
    }

    #[test]
    fn noiseless_blobs_are_nearest_mean_separable() {
        let ds = synthetic_blobs_with_noise(100, 10, [1, 28, 28], 3, 0.0).unwrap();
        assert_eq!(nearest_mean_accuracy(&ds), 1.0);
    }

    #[test]
    fn requires_one_sample_per_class() {
        assert!(synthetic_blobs(3, 4, [1, 2, 2], 0).is_err());
    }
}
