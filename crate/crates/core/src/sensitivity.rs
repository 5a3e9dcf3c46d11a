//! Per-filter Grad, Taylor and KL sensitivity scores and their exponential
//! fusion.
//!
//! For a filter with elements `F_i` and calibration batches `b = 1..B`:
//!
//! ```text
//! Grad(F)   = (1 / (|F|·B)) Σ_b Σ_i |∂L_b/∂F_i|
//! Taylor(F) = (1 / B)       Σ_b Σ_i |∂L_b/∂F_i · F_i|
//! KL(F)     = mean over samples of D_KL(p_orig ∥ p_without_F)
//! Imp(F)    = e^|g−t| + e^|t−k| + ½e^|g−k|
//! ```
//!
//! where `g, t, k` are the three metrics min-max normalized within the layer.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{batch_indices, Batch, Dataset};
use crate::error::{Error, Result};
use crate::model::ModelGraph;
use crate::tensor::{kl_divergence, Real, Tape, Targets, Tensor, Var};

pub const DEFAULT_CALIB_BATCHES: usize = 8;
pub const DEFAULT_CALIB_BATCH_SIZE: usize = 64;
pub const HIST_BINS: usize = 32;
const HIST_FLOOR: f64 = 1e-10;

/// Fixed batch sequence shared by all three metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationSet {
    batches: Vec<Batch>,
}

impl CalibrationSet {
    /// Draws up to `batch_count` full batches from a seeded shuffle of `ds`.
    pub fn from_dataset(
        ds: &Dataset,
        batch_count: usize,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        if batch_count == 0 || ds.is_empty() {
            return Err(Error::InvalidArgument(
                "calibration set must be non-empty".into(),
            ));
        }
        let bs = batch_size.min(ds.len());
        let batches = batch_indices(ds.len(), bs, seed)?
            .into_iter()
            .filter(|b| b.len() == bs)
            .take(batch_count)
            .map(|idx| ds.batch(&idx))
            .collect();
        Self::from_batches(batches)
    }

    pub fn from_batches(batches: Vec<Batch>) -> Result<Self> {
        if batches.is_empty() || batches.iter().any(Batch::is_empty) {
            return Err(Error::InvalidArgument(
                "calibration set must be non-empty".into(),
            ));
        }
        Ok(CalibrationSet { batches })
    }

    pub fn batches(&self) -> &[Batch] {
        &self.batches
    }

    pub fn batch_count(&self) -> usize {
        self.batches.len()
    }

    pub fn sample_count(&self) -> usize {
        self.batches.iter().map(Batch::len).sum()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlMode {
    /// KL between softmax outputs with and without the filter's map.
    #[default]
    MaskedOutput,
    /// KL between 32-bin histograms of the layer's activations with and
    /// without the filter.
    ActivationHist,
}

impl fmt::Display for KlMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KlMode::MaskedOutput => "masked_output",
            KlMode::ActivationHist => "activation_hist",
        })
    }
}

impl FromStr for KlMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "masked_output" => Ok(KlMode::MaskedOutput),
            "activation_hist" => Ok(KlMode::ActivationHist),
            other => Err(Error::InvalidArgument(format!(
                "unknown KL mode {other:?} (expected masked_output or activation_hist)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterScore {
    pub layer_id: usize,
    pub filter_idx: usize,
    pub grad: f64,
    pub taylor: f64,
    pub kl: f64,
    pub grad_n: f64,
    pub taylor_n: f64,
    pub kl_n: f64,
    pub imp: f64,
}

const CSV_HEADER: &str = "layer_id,filter_idx,grad,taylor,kl,grad_n,taylor_n,kl_n,imp";

/// One row per conv filter, ordered by `(layer_id, filter_idx)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreTable {
    pub rows: Vec<FilterScore>,
}

impl ScoreTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn layer_imps(&self, layer_id: usize) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.layer_id == layer_id)
            .map(|r| r.imp)
            .collect()
    }

    pub fn layer_count(&self) -> usize {
        self.rows.iter().map(|r| r.layer_id + 1).max().unwrap_or(0)
    }

    /// Shortest round-trip decimal formatting, so parsing restores every
    /// value bit for bit.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
                r.layer_id,
                r.filter_idx,
                r.grad,
                r.taylor,
                r.kl,
                r.grad_n,
                r.taylor_n,
                r.kl_n,
                r.imp
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let err = |line: usize, reason: String| Error::parse("score csv", Some(line), reason);
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == CSV_HEADER => {}
            _ => return Err(err(0, format!("header must be {CSV_HEADER:?}"))),
        }
        let mut rows = Vec::new();
        for (n, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split(',').map(str::trim).collect();
            if cells.len() != 9 {
                return Err(err(n, format!("expected 9 columns, found {}", cells.len())));
            }
            let int = |i: usize| {
                cells[i]
                    .parse::<usize>()
                    .map_err(|e| err(n, format!("column {i}: {e}")))
            };
            let real = |i: usize| {
                let v = cells[i]
                    .parse::<f64>()
                    .map_err(|e| err(n, format!("column {i}: {e}")))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(err(n, format!("column {i} is not finite")))
                }
            };
            rows.push(FilterScore {
                layer_id: int(0)?,
                filter_idx: int(1)?,
                grad: real(2)?,
                taylor: real(3)?,
                kl: real(4)?,
                grad_n: real(5)?,
                taylor_n: real(6)?,
                kl_n: real(7)?,
                imp: real(8)?,
            });
        }
        let sorted = rows
            .windows(2)
            .all(|w| (w[0].layer_id, w[0].filter_idx) < (w[1].layer_id, w[1].filter_idx));
        if !sorted {
            return Err(err(
                0,
                "rows must be sorted by (layer_id, filter_idx) without duplicates".into(),
            ));
        }
        Ok(ScoreTable { rows })
    }

    /// Checks that the table has exactly one row per filter of `model`.
    pub fn check_matches<T: Real>(&self, model: &ModelGraph<T>) -> Result<()> {
        let mut expected = Vec::new();
        for (l, f) in model.filter_counts().into_iter().enumerate() {
            expected.extend((0..f).map(|i| (l, i)));
        }
        let got: Vec<(usize, usize)> = self
            .rows
            .iter()
            .map(|r| (r.layer_id, r.filter_idx))
            .collect();
        if got != expected {
            return Err(Error::InvalidArgument(format!(
                "score table has {} rows, model has {} filters in {:?}",
                got.len(),
                expected.len(),
                model.filter_counts()
            )));
        }
        Ok(())
    }
}

/// `e^|g−t| + e^|t−k| + ½e^|g−k|`.
pub fn fuse(grad_n: f64, taylor_n: f64, kl_n: f64) -> f64 {
    (grad_n - taylor_n).abs().exp()
        + (taylor_n - kl_n).abs().exp()
        + 0.5 * (grad_n - kl_n).abs().exp()
}

/// Min-max scaling to `[0, 1]`; a constant layer maps to all zeros.
pub fn normalize_scores(raw: &[f64]) -> Vec<f64> {
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    raw.iter()
        .map(|&v| {
            if span > 0.0 {
                ((v - lo) / span).clamp(0.0, 1.0)
            } else {
                0.0
            }
        })
        .collect()
}

/// Grad and Taylor values for one layer: `(grad, taylor)` per filter.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGradMetrics {
    pub grad: Vec<f64>,
    pub taylor: Vec<f64>,
}

/// Grad and Taylor metrics of one conv weight from its per-batch gradients.
pub fn filter_metrics<T: Real>(
    weight: &Tensor<T>,
    batch_grads: &[Tensor<T>],
) -> Result<LayerGradMetrics> {
    if batch_grads.is_empty() {
        return Err(Error::InvalidArgument("no gradients".into()));
    }
    let filters = weight.dim(0);
    let per = weight.numel() / filters.max(1);
    let mut grad = vec![0f64; filters];
    let mut taylor = vec![0f64; filters];
    for g in batch_grads {
        if g.shape() != weight.shape() {
            return Err(Error::shape(
                "filter_metrics",
                format!("gradient {:?} vs weight {:?}", g.shape(), weight.shape()),
            ));
        }
        for f in 0..filters {
            let (w, g) = (
                &weight.data()[f * per..(f + 1) * per],
                &g.data()[f * per..(f + 1) * per],
            );
            for (&wi, &gi) in w.iter().zip(g) {
                grad[f] += gi.f64().abs();
                taylor[f] += (gi.f64() * wi.f64()).abs();
            }
        }
    }
    let b = batch_grads.len() as f64;
    for f in 0..filters {
        grad[f] /= per as f64 * b;
        taylor[f] /= b;
    }
    Ok(LayerGradMetrics { grad, taylor })
}

/// Grad/Taylor metrics for every conv layer under a caller-supplied loss.
pub fn gradient_scores_with<T, L>(
    model: &ModelGraph<T>,
    calib: &CalibrationSet,
    mut loss: L,
) -> Result<Vec<LayerGradMetrics>>
where
    T: Real,
    L: FnMut(&mut Tape<T>, Var, &Batch) -> Result<Var>,
{
    let convs = model.conv_layers();
    let mut grads: Vec<Vec<Tensor<T>>> = vec![Vec::new(); convs.len()];
    for batch in calib.batches() {
        let mut tape = Tape::new();
        let (logits, params) = model.forward_tape(&mut tape, &batch.inputs.cast())?;
        let l = loss(&mut tape, logits, batch)?;
        tape.backward(l)?;
        for (slot, &layer) in convs.iter().enumerate() {
            let pv = params
                .iter()
                .find(|p| p.layer == layer)
                .expect("conv has params");
            let g = tape
                .take_grad(pv.weight)
                .unwrap_or_else(|| Tensor::zeros(tape.value(pv.weight).shape().to_vec()));
            grads[slot].push(g);
        }
    }
    convs
        .iter()
        .zip(&grads)
        .map(|(&layer, g)| {
            filter_metrics(model.layers[layer].weight.as_ref().expect("conv weight"), g)
        })
        .collect()
}

/// Grad/Taylor metrics from plain cross-entropy on the hard labels.
pub fn gradient_scores<T: Real>(
    model: &ModelGraph<T>,
    calib: &CalibrationSet,
) -> Result<Vec<LayerGradMetrics>> {
    gradient_scores_with(model, calib, |tape, logits, batch| {
        tape.cross_entropy_ls(logits, Targets::Hard(&batch.hard_labels), 0.0)
    })
}

fn softmax_rows(logits: &Tensor<impl Real>) -> Vec<Vec<f64>> {
    let c = logits.dim(1);
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let m = row
                .iter()
                .map(|v| v.f64())
                .fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v.f64() - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

fn worker_count(jobs: usize) -> usize {
    std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(jobs)
        .max(1)
}

/// Runs `f` over `0..jobs` on scoped threads; results come back in index
/// order so the output does not depend on scheduling.
fn parallel_map<R: Send>(jobs: usize, f: impl Fn(usize) -> Result<R> + Sync) -> Result<Vec<R>> {
    let workers = worker_count(jobs);
    if workers <= 1 {
        return (0..jobs).map(&f).collect();
    }
    let chunks: Vec<Result<Vec<R>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let f = &f;
                s.spawn(move || {
                    (w..jobs)
                        .step_by(workers)
                        .map(f)
                        .collect::<Result<Vec<R>>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("scoring worker panicked"))
            .collect()
    });
    let mut per_worker: Vec<std::vec::IntoIter<R>> = Vec::with_capacity(workers);
    for c in chunks {
        per_worker.push(c?.into_iter());
    }
    Ok((0..jobs)
        .map(|i| per_worker[i % workers].next().expect("job result"))
        .collect())
}

/// KL metric for every filter of every conv layer.
pub fn kl_scores<T: Real>(
    model: &ModelGraph<T>,
    calib: &CalibrationSet,
    mode: KlMode,
) -> Result<Vec<Vec<f64>>> {
    let inputs: Vec<Tensor<T>> = calib.batches().iter().map(|b| b.inputs.cast()).collect();
    match mode {
        KlMode::MaskedOutput => {
            let reference: Vec<Vec<Vec<f64>>> = inputs
                .iter()
                .map(|x| Ok(softmax_rows(&model.forward(x)?)))
                .collect::<Result<_>>()?;
            let counts = model.filter_counts();
            let jobs: Vec<(usize, usize)> = counts
                .iter()
                .enumerate()
                .flat_map(|(l, &f)| (0..f).map(move |i| (l, i)))
                .collect();
            let flat = parallel_map(jobs.len(), |j| {
                let (l, f) = jobs[j];
                kl_masked(model, &inputs, &reference, l, f)
            })?;
            let mut it = flat.into_iter();
            Ok(counts
                .iter()
                .map(|&f| it.by_ref().take(f).collect())
                .collect())
        }
        KlMode::ActivationHist => kl_hist(model, &inputs),
    }
}

/// `KL(p_orig ∥ p_masked)` averaged over every calibration sample, with
/// filter `filter` of conv `conv` zeroed.
pub fn kl_masked<T: Real>(
    model: &ModelGraph<T>,
    inputs: &[Tensor<T>],
    reference: &[Vec<Vec<f64>>],
    conv: usize,
    filter: usize,
) -> Result<f64> {
    let counts = model.filter_counts();
    let mut masks = vec![None; counts.len()];
    let mut keep = vec![true; counts[conv]];
    keep[filter] = false;
    masks[conv] = Some(keep);
    let (mut total, mut n) = (0.0, 0usize);
    for (x, p_rows) in inputs.iter().zip(reference) {
        let q_rows = softmax_rows(&model.forward_masked(x, &masks)?);
        for (p, q) in p_rows.iter().zip(&q_rows) {
            total += kl_divergence(p, q)?;
            n += 1;
        }
    }
    Ok(total / n.max(1) as f64)
}

fn histogram(values: impl Iterator<Item = f64>, hi: f64) -> Vec<f64> {
    let mut h = vec![0f64; HIST_BINS];
    for v in values {
        let bin = if hi > 0.0 {
            ((v / hi) * HIST_BINS as f64) as usize
        } else {
            0
        };
        h[bin.min(HIST_BINS - 1)] += 1.0;
    }
    let floored: Vec<f64> = h.iter().map(|c| c + HIST_FLOOR).collect();
    let s: f64 = floored.iter().sum();
    floored.into_iter().map(|c| c / s).collect()
}

fn kl_hist<T: Real>(model: &ModelGraph<T>, inputs: &[Tensor<T>]) -> Result<Vec<Vec<f64>>> {
    let counts = model.filter_counts();
    // Post-ReLU activations per conv, per filter.
    let mut acts: Vec<Vec<Vec<f64>>> = counts.iter().map(|&f| vec![Vec::new(); f]).collect();
    for x in inputs {
        let (_, captured) = model.forward_capture(x)?;
        for (l, y) in captured.iter().enumerate() {
            let (n, c) = (y.dim(0), y.dim(1));
            let plane = y.numel() / (n * c).max(1);
            for s in 0..n {
                for (ch, dst) in acts[l].iter_mut().enumerate().take(c) {
                    let start = (s * c + ch) * plane;
                    dst.extend(
                        y.data()[start..start + plane]
                            .iter()
                            .map(|v| v.f64().max(0.0)),
                    );
                }
            }
        }
    }
    let mut out = Vec::with_capacity(counts.len());
    for layer in &acts {
        let hi = layer.iter().flatten().copied().fold(0.0, f64::max);
        let full = histogram(layer.iter().flatten().copied(), hi);
        let mut scores = Vec::with_capacity(layer.len());
        for f in 0..layer.len() {
            let rest = layer
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != f)
                .flat_map(|(_, v)| v.iter().copied());
            scores.push(kl_divergence(&full, &histogram(rest, hi))?);
        }
        out.push(scores);
    }
    Ok(out)
}

/// Assembles normalized and fused rows from raw per-layer metrics.
pub fn assemble(grads: &[LayerGradMetrics], kls: &[Vec<f64>]) -> Result<ScoreTable> {
    if grads.len() != kls.len() {
        return Err(Error::InvalidArgument(format!(
            "{} gradient layers vs {} KL layers",
            grads.len(),
            kls.len()
        )));
    }
    let mut rows = Vec::new();
    for (layer_id, (gm, kl)) in grads.iter().zip(kls).enumerate() {
        if gm.grad.len() != kl.len() || gm.taylor.len() != kl.len() {
            return Err(Error::InvalidArgument(format!(
                "layer {layer_id}: metric lengths disagree"
            )));
        }
        if let Some(bad) = gm
            .grad
            .iter()
            .chain(&gm.taylor)
            .chain(kl)
            .find(|v| !v.is_finite())
        {
            return Err(Error::InvalidArgument(format!(
                "layer {layer_id}: non-finite metric {bad}"
            )));
        }
        let (gn, tn, kn) = (
            normalize_scores(&gm.grad),
            normalize_scores(&gm.taylor),
            normalize_scores(kl),
        );
        for f in 0..kl.len() {
            rows.push(FilterScore {
                layer_id,
                filter_idx: f,
                grad: gm.grad[f],
                taylor: gm.taylor[f],
                kl: kl[f],
                grad_n: gn[f],
                taylor_n: tn[f],
                kl_n: kn[f],
                imp: fuse(gn[f], tn[f], kn[f]),
            });
        }
    }
    Ok(ScoreTable { rows })
}

/// Full score table: one row per conv filter.
pub fn score_model<T: Real>(
    model: &ModelGraph<T>,
    calib: &CalibrationSet,
    mode: KlMode,
) -> Result<ScoreTable> {
    let grads = gradient_scores(model, calib)?;
    let kls = kl_scores(model, calib, mode)?;
    assemble(&grads, &kls)
}
