//! Base training, knowledge-distillation fine-tuning, and evaluation.

mod optim;
mod schedule;

pub use optim::{AdamW, Optimizer, OptimizerKind, Sgd};
pub use schedule::{alpha_schedule, cosine_warm_restarts};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{mixup, Batch, Dataset};
use crate::error::{Error, Result};
use crate::model::ModelGraph;
use crate::tensor::{softmax, Real, Tape, Targets, Tensor, Var};

pub const VALIDATION_FRACTION: f64 = 0.1;
const EVAL_BATCH: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub accumulation_steps: usize,
    pub optimizer: OptimizerKind,
    pub lr_max: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub t0: usize,
    pub t_mult: usize,
    /// `0` disables mixup.
    pub mixup_alpha: f64,
    pub label_smoothing: f64,
    pub seed: u64,
    /// Recompute input normalization from the training split before training.
    pub fit_normalization: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 32,
            accumulation_steps: 4,
            optimizer: OptimizerKind::SgdMomentum,
            lr_max: 1e-3,
            lr_min: 0.0,
            momentum: 0.9,
            weight_decay: 5e-4,
            t0: 50,
            t_mult: 2,
            mixup_alpha: 0.2,
            label_smoothing: 0.1,
            seed: 0,
            fit_normalization: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if self.accumulation_steps == 0 {
            return bad("accumulation_steps must be at least 1".into());
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_max && self.lr_max.is_finite()) {
            return bad(format!(
                "need 0 ≤ lr_min ≤ lr_max, got {} and {}",
                self.lr_min, self.lr_max
            ));
        }
        if self.t0 == 0 || self.t_mult == 0 {
            return bad("T0 and Tmult must be at least 1".into());
        }
        if !(self.mixup_alpha >= 0.0 && self.mixup_alpha.is_finite()) {
            return bad(format!(
                "mixup alpha {} must be non-negative",
                self.mixup_alpha
            ));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!(
                "label smoothing {} outside [0, 1)",
                self.label_smoothing
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KdConfig {
    pub temperature: f64,
    pub alpha_start: f64,
    pub alpha_end: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub accumulation_steps: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub t0: usize,
    pub t_mult: usize,
    pub label_smoothing: f64,
    pub seed: u64,
}

impl Default for KdConfig {
    fn default() -> Self {
        KdConfig {
            temperature: 4.0,
            alpha_start: 0.9,
            alpha_end: 0.1,
            epochs: 30,
            batch_size: 32,
            accumulation_steps: 1,
            lr_max: 1e-4,
            lr_min: 0.0,
            weight_decay: 1e-2,
            t0: 10,
            t_mult: 2,
            label_smoothing: 0.1,
            seed: 0,
        }
    }
}

impl KdConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature {} must be positive", self.temperature));
        }
        if !(0.0 <= self.alpha_end && self.alpha_end <= self.alpha_start && self.alpha_start <= 1.0)
        {
            return bad(format!(
                "need 0 ≤ alpha_end ≤ alpha_start ≤ 1, got {} and {}",
                self.alpha_end, self.alpha_start
            ));
        }
        self.as_train().validate()
    }

    fn as_train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            accumulation_steps: self.accumulation_steps,
            optimizer: OptimizerKind::Adamw,
            lr_max: self.lr_max,
            lr_min: self.lr_min,
            momentum: 0.0,
            weight_decay: self.weight_decay,
            t0: self.t0,
            t_mult: self.t_mult,
            mixup_alpha: 0.0,
            label_smoothing: self.label_smoothing,
            seed: self.seed,
            fit_normalization: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub loss: Vec<f64>,
    pub lr: Vec<f64>,
    pub train_acc: Vec<f64>,
    pub val_acc: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
}

fn argmax_row<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn count_correct<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let c = logits.dim(1);
    logits
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &y)| argmax_row(row) == y)
        .count()
}

/// Top-1 accuracy; ties resolve to the lowest class index.
pub fn evaluate<T: Real>(model: &ModelGraph<T>, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot evaluate on an empty dataset".into(),
        ));
    }
    let mut correct = 0;
    for b in ds.sequential_batches(EVAL_BATCH) {
        correct += count_correct(&model.forward(&b.inputs.cast())?, &b.hard_labels);
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// `α·T²·KL(softmax(teacher/T) ∥ softmax(student/T)) + (1 − α)·CE_ls`. The
/// KL term is the batch mean.
pub fn kd_loss<T: Real>(
    tape: &mut Tape<T>,
    student_logits: Var,
    teacher_logits: &Tensor<T>,
    hard_targets: &[usize],
    temperature: f64,
    alpha: f64,
    eps_ls: f64,
) -> Result<Var> {
    let ce = tape.cross_entropy_ls(student_logits, Targets::Hard(hard_targets), eps_ls)?;
    if alpha == 0.0 {
        return Ok(ce);
    }
    let t = T::of(temperature);
    let soft = softmax(&teacher_logits.map(|v| v / t))?;
    let kl = tape.soft_target_kl(student_logits, &soft, t)?;
    let kl = tape.scale(kl, T::of(alpha))?;
    if alpha == 1.0 {
        return Ok(kl);
    }
    let ce = tape.scale(ce, T::of(1.0 - alpha))?;
    tape.add(kl, ce)
}

enum Objective<'a> {
    Supervised {
        mixup_alpha: f64,
    },
    Distill {
        teacher: &'a ModelGraph<f32>,
        temperature: f64,
        alpha: f64,
    },
}

/// Mean-over-micro-batches loss gradients, in [`ModelGraph::params_mut`]
/// order, plus the mean loss and the hard-label correct count.
pub struct Accumulated {
    pub grads: Vec<Tensor<f32>>,
    pub loss: f64,
    pub correct: usize,
}

fn micro_batch_grads(
    model: &ModelGraph<f32>,
    batch: &Batch,
    objective: &Objective<'_>,
    eps_ls: f64,
) -> Result<(Vec<Tensor<f32>>, f64, usize)> {
    let mut tape = Tape::unchecked();
    let (logits, params) = model.forward_tape(&mut tape, &batch.inputs)?;
    let loss = match objective {
        Objective::Supervised { .. } => match &batch.soft_labels {
            Some(soft) => tape.cross_entropy_ls(logits, Targets::Soft(soft), eps_ls)?,
            None => tape.cross_entropy_ls(logits, Targets::Hard(&batch.hard_labels), eps_ls)?,
        },
        Objective::Distill {
            teacher,
            temperature,
            alpha,
        } => {
            let t_logits = teacher.forward(&batch.inputs)?;
            kd_loss(
                &mut tape,
                logits,
                &t_logits,
                &batch.hard_labels,
                *temperature,
                *alpha,
                eps_ls,
            )?
        }
    };
    let loss_val = tape.value(loss).item() as f64;
    let correct = count_correct(tape.value(logits), &batch.hard_labels);
    tape.backward(loss)?;
    let mut grads = Vec::with_capacity(params.len() * 2);
    for pv in &params {
        for v in [pv.weight, pv.bias] {
            let g = tape
                .take_grad(v)
                .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape().to_vec()));
            grads.push(g);
        }
    }
    Ok((grads, loss_val, correct))
}

/// Averages gradients over a group of micro-batches.
pub fn accumulate_gradients(
    model: &ModelGraph<f32>,
    batches: &[Batch],
    eps_ls: f64,
) -> Result<Accumulated> {
    accumulate(
        model,
        batches,
        &Objective::Supervised { mixup_alpha: 0.0 },
        eps_ls,
    )
}

fn accumulate(
    model: &ModelGraph<f32>,
    batches: &[Batch],
    objective: &Objective<'_>,
    eps_ls: f64,
) -> Result<Accumulated> {
    if batches.is_empty() {
        return Err(Error::InvalidArgument(
            "no micro-batches to accumulate".into(),
        ));
    }
    let mut sum: Option<Vec<Tensor<f32>>> = None;
    let (mut loss, mut correct) = (0.0, 0);
    for b in batches {
        let (g, l, c) = micro_batch_grads(model, b, objective, eps_ls)?;
        loss += l;
        correct += c;
        match sum.as_mut() {
            None => sum = Some(g),
            Some(s) => {
                for (acc, g) in s.iter_mut().zip(&g) {
                    for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += v;
                    }
                }
            }
        }
    }
    let k = batches.len() as f32;
    let mut grads = sum.expect("at least one micro-batch");
    if batches.len() > 1 {
        for g in &mut grads {
            g.data_mut().iter_mut().for_each(|v| *v /= k);
        }
    }
    Ok(Accumulated {
        grads,
        loss: loss / batches.len() as f64,
        correct,
    })
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(epoch as u64 + 1)
}

fn fit(
    model: &ModelGraph<f32>,
    dataset: &Dataset,
    cfg: &TrainConfig,
    kd: Option<(&ModelGraph<f32>, &KdConfig)>,
) -> Result<(ModelGraph<f32>, TrainReport)> {
    cfg.validate()?;
    let (train_ds, val_ds) = dataset.split_validation(VALIDATION_FRACTION, cfg.seed)?;
    if train_ds.is_empty() || val_ds.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "dataset of {} samples is too small to split",
            dataset.len()
        )));
    }
    let mut model = model.clone();
    if cfg.fit_normalization {
        model.norm = train_ds.channel_stats();
    }
    let mut opt: Box<dyn Optimizer<f32>> = match cfg.optimizer {
        OptimizerKind::SgdMomentum => Box::new(Sgd::new(cfg.momentum, cfg.weight_decay)),
        OptimizerKind::Adamw => Box::new(AdamW::new(cfg.weight_decay)),
    };
    let mut mix_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x4D49_5855_5000);
    let mut report = TrainReport::default();
    let mut best: Option<ModelGraph<f32>> = None;

    for epoch in 0..cfg.epochs {
        let lr = cosine_warm_restarts(epoch, cfg.t0, cfg.t_mult, cfg.lr_max, cfg.lr_min);
        let objective = match kd {
            Some((teacher, k)) => Objective::Distill {
                teacher,
                temperature: k.temperature,
                alpha: alpha_schedule(epoch, k.epochs, k.alpha_start, k.alpha_end),
            },
            None => Objective::Supervised {
                mixup_alpha: cfg.mixup_alpha,
            },
        };
        let mut batches: Vec<Batch> = train_ds
            .batches(cfg.batch_size, epoch_seed(cfg.seed, epoch))?
            .collect();
        if let Objective::Supervised { mixup_alpha } = objective {
            if mixup_alpha > 0.0 {
                for b in &mut batches {
                    if b.len() >= 2 {
                        *b = mixup(b, mixup_alpha, train_ds.class_count(), &mut mix_rng)?;
                    }
                }
            }
        }
        let (mut loss_sum, mut groups, mut correct) = (0.0, 0usize, 0usize);
        for group in batches.chunks(cfg.accumulation_steps) {
            let acc = accumulate(&model, group, &objective, cfg.label_smoothing)?;
            if !acc.loss.is_finite() || acc.grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    loss: acc.loss,
                });
            }
            opt.step(&mut model.params_mut(), &acc.grads, lr)?;
            loss_sum += acc.loss;
            correct += acc.correct;
            groups += 1;
        }
        if model.params().iter().any(|(_, t)| !t.is_finite()) {
            return Err(Error::Diverged {
                epoch,
                loss: f64::NAN,
            });
        }
        let val = evaluate(&model, &val_ds)?;
        report.loss.push(loss_sum / groups as f64);
        report.lr.push(lr);
        report
            .train_acc
            .push(correct as f64 / train_ds.len() as f64);
        report.val_acc.push(val);
        if best.is_none() || val > report.best_val_acc {
            report.best_epoch = epoch;
            report.best_val_acc = val;
            best = Some(model.clone());
        }
    }
    let mut best = best.expect("at least one epoch");
    best.history = serde_json::to_value(&report)?;
    Ok((best, report))
}

/// Trains from the given initialization; returns the best-on-validation
/// model and the per-epoch report.
pub fn train(
    model: &ModelGraph<f32>,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<(ModelGraph<f32>, TrainReport)> {
    check_dataset(model, dataset)?;
    fit(model, dataset, cfg, None)
}

/// KD fine-tuning of `student` against a frozen `teacher`.
pub fn distill(
    student: &ModelGraph<f32>,
    teacher: &ModelGraph<f32>,
    dataset: &Dataset,
    kd: &KdConfig,
) -> Result<(ModelGraph<f32>, TrainReport)> {
    kd.validate()?;
    if student.meta.class_count != teacher.meta.class_count {
        return Err(Error::InvalidArgument(format!(
            "student has {} classes, teacher has {}",
            student.meta.class_count, teacher.meta.class_count
        )));
    }
    check_dataset(student, dataset)?;
    fit(student, dataset, &kd.as_train(), Some((teacher, kd)))
}

fn check_dataset(model: &ModelGraph<f32>, ds: &Dataset) -> Result<()> {
    if ds.sample_shape() != model.meta.input_shape || ds.class_count() != model.meta.class_count {
        return Err(Error::InvalidArgument(format!(
            "dataset {:?} with {} classes does not fit model input {:?} with {} classes",
            ds.sample_shape(),
            ds.class_count(),
            model.meta.input_shape,
            model.meta.class_count
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_blobs;
    use crate::model::build_tiny_cnn;

    fn blobs(n: usize, seed: u64) -> Dataset {
        synthetic_blobs(n, 10, [1, 28, 28], seed).unwrap()
    }

    fn quick_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            lr_max: 0.05,
            t0: epochs,
            mixup_alpha: 0.0,
            accumulation_steps: 1,
            ..Default::default()
        }
    }

    #[test]
    fn accumulation_of_identical_batches_equals_single_batch() {
        let m = build_tiny_cnn::<f32>().unwrap().initialized(4);
        let ds = blobs(16, 1);
        let b = ds.batch(&(0..16).collect::<Vec<_>>());
        let one = accumulate_gradients(&m, std::slice::from_ref(&b), 0.1).unwrap();
        let four = accumulate_gradients(&m, &[b.clone(), b.clone(), b.clone(), b], 0.1).unwrap();
        for (a, c) in one.grads.iter().zip(&four.grads) {
            assert!(a.max_abs_diff(c).unwrap() <= 1e-6);
        }
        let (mut p1, mut p4) = (m.clone(), m.clone());
        Sgd::new(0.9, 5e-4)
            .step(&mut p1.params_mut(), &one.grads, 0.01)
            .unwrap();
        Sgd::new(0.9, 5e-4)
            .step(&mut p4.params_mut(), &four.grads, 0.01)
            .unwrap();
        for ((_, a), (_, c)) in p1.params().iter().zip(p4.params()) {
            assert!(a.max_abs_diff(c).unwrap() <= 1e-6);
        }
    }

    #[test]
    fn lr_trace_follows_schedule() {
        let m = build_tiny_cnn::<f32>().unwrap().initialized(1);
        let cfg = TrainConfig {
            epochs: 5,
            t0: 2,
            lr_max: 0.02,
            lr_min: 0.001,
            ..quick_cfg(5)
        };
        let (_, rep) = train(&m, &blobs(60, 2), &cfg).unwrap();
        for (e, lr) in rep.lr.iter().enumerate() {
            assert_eq!(*lr, cosine_warm_restarts(e, 2, 2, 0.02, 0.001));
        }
        assert_eq!(rep.val_acc[rep.best_epoch], rep.best_val_acc);
        assert!(rep.val_acc.iter().all(|&v| v <= rep.best_val_acc));
    }

    #[test]
    fn smoke_train_reaches_high_accuracy() {
        let m = build_tiny_cnn::<f32>().unwrap().initialized(7);
        let (best, rep) = train(&m, &blobs(400, 3), &quick_cfg(20)).unwrap();
        assert!(
            rep.train_acc.last().copied().unwrap() >= 0.95,
            "{:?}",
            rep.train_acc
        );
        assert!(rep.best_val_acc >= 0.9);
        assert!(best.history.get("best_epoch").is_some());
    }

    #[test]
    fn training_is_reproducible() {
        let m = build_tiny_cnn::<f32>().unwrap().initialized(7);
        let cfg = TrainConfig {
            mixup_alpha: 0.2,
            accumulation_steps: 2,
            ..quick_cfg(2)
        };
        let a = train(&m, &blobs(80, 5), &cfg).unwrap();
        let b = train(&m, &blobs(80, 5), &cfg).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn divergence_is_reported() {
        let m = build_tiny_cnn::<f32>().unwrap().initialized(7);
        let cfg = TrainConfig {
            lr_max: 1e30,
            ..quick_cfg(3)
        };
        assert!(matches!(
            train(&m, &blobs(60, 2), &cfg),
            Err(Error::Diverged { .. })
        ));
    }

    #[test]
    fn kd_loss_degenerate_cases() {
        let z = Tensor::from_fn(vec![3, 4], |i| (i as f64 * 0.37).sin());
        let labels = [0, 3, 1];
        let mut tape = Tape::<f64>::new();
        let v = tape.param(z.clone()).unwrap();
        let kd = kd_loss(&mut tape, v, &z, &labels, 4.0, 1.0, 0.1).unwrap();
        assert!(tape.value(kd).item().abs() < 1e-12);

        let teacher = z.map(|v| v * 2.0 - 0.5);
        let kd = kd_loss(&mut tape, v, &teacher, &labels, 4.0, 0.0, 0.1).unwrap();
        let ce = tape
            .cross_entropy_ls(v, Targets::Hard(&labels), 0.1)
            .unwrap();
        assert_eq!(tape.value(kd).item(), tape.value(ce).item());
    }

    #[test]
    fn kd_loss_gradient_matches_finite_differences() {
        let z = Tensor::from_fn(vec![2, 5], |i| (i as f64 * 0.61).cos());
        let teacher = Tensor::from_fn(vec![2, 5], |i| (i as f64 * 1.3).sin() * 2.0);
        let labels = [4, 1];
        let eval = |z: &Tensor<f64>| {
            let mut tape = Tape::<f64>::new();
            let v = tape.param(z.clone()).unwrap();
            let l = kd_loss(&mut tape, v, &teacher, &labels, 4.0, 0.6, 0.1).unwrap();
            tape.value(l).item()
        };
        let mut tape = Tape::<f64>::new();
        let v = tape.param(z.clone()).unwrap();
        let l = kd_loss(&mut tape, v, &teacher, &labels, 4.0, 0.6, 0.1).unwrap();
        tape.backward(l).unwrap();
        let g = tape.grad(v).unwrap().clone();
        let h = 1e-5;
        for i in 0..z.numel() {
            let (mut up, mut dn) = (z.clone(), z.clone());
            up.data_mut()[i] += h;
            dn.data_mut()[i] -= h;
            let fd = (eval(&up) - eval(&dn)) / (2.0 * h);
            let an = g.data()[i];
            assert!(
                (fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-6),
                "{i}: {fd} vs {an}"
            );
        }
    }

    #[test]
    fn evaluate_constructed_fixtures() {
        let m = build_tiny_cnn::<f32>().unwrap();
        // Zero model: uniform logits, argmax resolves to class 0.
        let ds = blobs(100, 9);
        assert!((evaluate(&m, &ds).unwrap() - 0.1).abs() < 1e-12);
        let zeros: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels()[i] == 0).collect();
        assert_eq!(evaluate(&m, &ds.subset(&zeros)).unwrap(), 1.0);
        let others: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels()[i] != 0).collect();
        assert_eq!(evaluate(&m, &ds.subset(&others)).unwrap(), 0.0);
    }

    #[test]
    fn distill_checks_classes_and_degenerates_to_fine_tuning() {
        let m = build_tiny_cnn::<f32>().unwrap().initialized(7);
        let ds = blobs(120, 6);
        let (teacher, _) = train(&m, &ds, &quick_cfg(4)).unwrap();

        let kd = KdConfig {
            epochs: 3,
            alpha_start: 0.0,
            alpha_end: 0.0,
            lr_max: 1e-3,
            ..Default::default()
        };
        let (student, rep) = distill(&teacher, &teacher, &ds, &kd).unwrap();
        let plain = TrainConfig {
            optimizer: OptimizerKind::Adamw,
            weight_decay: kd.weight_decay,
            lr_max: kd.lr_max,
            t0: kd.t0,
            t_mult: kd.t_mult,
            fit_normalization: false,
            ..quick_cfg(3)
        };
        let (ft, ft_rep) = train(&teacher, &ds, &plain).unwrap();
        assert_eq!(rep, ft_rep);
        assert_eq!(student.params(), ft.params());

        let mut other = teacher.clone();
        other.meta.class_count = 9;
        assert!(distill(&teacher, &other, &ds, &kd).is_err());
    }

    #[test]
    fn distilling_an_unpruned_copy_stays_close_to_teacher() {
        let m = build_tiny_cnn::<f32>().unwrap().initialized(7);
        let ds = blobs(300, 6);
        let (teacher, trep) = train(&m, &ds, &quick_cfg(8)).unwrap();
        let kd = KdConfig {
            epochs: 4,
            ..Default::default()
        };
        let (_, rep) = distill(&teacher, &teacher, &ds, &kd).unwrap();
        for v in &rep.val_acc {
            assert!(
                *v >= trep.best_val_acc - 0.01,
                "{v} vs {}",
                trep.best_val_acc
            );
        }
    }
}
