use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};

use super::Batch;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Draws the mixing weight `λ ~ Beta(alpha, alpha)`.
pub fn sample_mixup_lambda(alpha: f64, rng: &mut impl Rng) -> Result<f64> {
    let beta = Beta::new(alpha, alpha)
        .map_err(|e| Error::InvalidArgument(format!("mixup alpha {alpha}: {e}")))?;
    Ok(beta.sample(rng).clamp(0.0, 1.0))
}

/// Mixup with a sampled weight and a random pairing permutation.
pub fn mixup(batch: &Batch, alpha: f64, class_count: usize, rng: &mut impl Rng) -> Result<Batch> {
    if batch.len() < 2 {
        return Err(Error::InvalidArgument(
            "mixup needs at least two samples".into(),
        ));
    }
    let lambda = sample_mixup_lambda(alpha, rng)?;
    let mut perm: Vec<usize> = (0..batch.len()).collect();
    perm.shuffle(rng);
    mixup_with(batch, lambda, &perm, class_count)
}

/// `λ·x + (1 − λ)·x[perm]` for inputs and labels. Pixels stay inside the
/// interval spanned by the two source pixels.
pub fn mixup_with(batch: &Batch, lambda: f64, perm: &[usize], class_count: usize) -> Result<Batch> {
    let n = batch.len();
    if perm.len() != n || !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(
            "mixup needs λ in [0, 1] and a permutation of the batch".into(),
        ));
    }
    let per = batch.inputs.numel() / n.max(1);
    let x = batch.inputs.data();
    let lam = lambda as f32;
    let mut mixed = Vec::with_capacity(x.len());
    for (i, &j) in perm.iter().enumerate() {
        for (&a, &b) in x[i * per..(i + 1) * per]
            .iter()
            .zip(&x[j * per..(j + 1) * per])
        {
            let v = b + lam * (a - b);
            mixed.push(v.clamp(a.min(b), a.max(b)));
        }
    }
    let labels = match &batch.soft_labels {
        Some(s) => s.clone(),
        None => {
            let mut t = Tensor::zeros(vec![n, class_count]);
            for (i, &y) in batch.hard_labels.iter().enumerate() {
                t.data_mut()[i * class_count + y] = 1.0;
            }
            t
        }
    };
    let l = labels.data();
    let mut soft = Vec::with_capacity(l.len());
    for (i, &j) in perm.iter().enumerate() {
        for (&a, &b) in l[i * class_count..(i + 1) * class_count]
            .iter()
            .zip(&l[j * class_count..(j + 1) * class_count])
        {
            soft.push(lam * a + (1.0 - lam) * b);
        }
    }
    Ok(Batch {
        inputs: Tensor::new(batch.inputs.shape().to_vec(), mixed)?,
        hard_labels: batch.hard_labels.clone(),
        soft_labels: Some(Tensor::new(vec![n, class_count], soft)?),
    })
}
