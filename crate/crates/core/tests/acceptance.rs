//! End-to-end acceptance run. Prints one `PASS`/`FAIL` line per criterion
//! and exits non-zero if any criterion fails.

use std::f64::consts::E;
use std::io::Write as _;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dsfp::controller::{run_search, ControllerConfig};
use dsfp::data::{
    encode_cifar10_binary, encode_mnist_idx, parse_cifar10_binary, parse_mnist_idx,
    synthetic_blobs, Dataset,
};
use dsfp::harness::{run_stage, RunConfig, Stage};
use dsfp::model::{
    build_alexnet_cifar, build_tiny_cnn, build_vgg16_cifar, count_flops, count_params,
};
use dsfp::prune::{
    apply_prune, mask_equivalence_check, plan_from_scores, rank_filters, Direction, LayerPlan,
    PrunePlan,
};
use dsfp::sensitivity::{fuse, score_model, CalibrationSet, KlMode};
use dsfp::tensor::{Tape, Targets, Var};
use dsfp::train::{
    cosine_warm_restarts, distill, evaluate, train, AdamW, KdConfig, Optimizer, Sgd, TrainConfig,
};
use dsfp::{ModelGraph, Result, Tensor};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn line(name: &str, limit: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let t = Instant::now();
    let mut o = f();
    let took = t.elapsed();
    if took > limit {
        o.pass = false;
        o.detail = format!("{} (over the {:?} budget)", o.detail, limit);
    }
    let tag = if o.pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    writeln!(out, "{tag} {name}: {} [{:.2?}]", o.detail, took).unwrap();
    out.flush().unwrap();
    o.pass
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

// ---------------------------------------------------------------- anchors

fn anchors() -> Outcome {
    let alex = build_alexnet_cifar::<f32>().unwrap();
    let vgg = build_vgg16_cifar::<f32>().unwrap();
    let (af, ap, vf) = (
        alex.total_filters(),
        count_params(&alex).total,
        vgg.total_filters(),
    );
    outcome(
        af == 1152 && ap == 6_976_842 && vf == 4224,
        format!(
            "alexnet {af} filters / {ap} params, vgg16 {vf} filters (want 1152 / 6976842, 4224)"
        ),
    )
}

// ----------------------------------------------------------------- fusion

fn fusion() -> Outcome {
    let z = fuse(0.0, 0.0, 0.0);
    let one = fuse(1.0, 0.0, 0.0);
    let want = 1.5 * E + 1.0;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut violations = 0;
    for i in 0..100_000 {
        let (g, t, k) = if i % 10 == 0 {
            let c = rng.random::<f64>();
            (c, c, c)
        } else {
            (
                rng.random::<f64>(),
                rng.random::<f64>(),
                rng.random::<f64>(),
            )
        };
        let v = fuse(g, t, k);
        let equal = g == t && t == k;
        if equal != (v == 2.5) || v < 2.5 {
            violations += 1;
        }
    }
    outcome(
        (z - 2.5).abs() <= 1e-9 && (one - want).abs() <= 1e-9 && violations == 0,
        format!("fuse(0,0,0)={z}, fuse(1,0,0)={one:.9} (1.5e+1 = {want:.9}), {violations} sweep violations in 1e5"),
    )
}

// -------------------------------------------------------- gradient checks

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

type BuildFn = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;
type Build = Box<BuildFn>;

/// Gradient of `build(inputs)` w.r.t. every input element, by the tape and
/// by central differences. Returns the worst relative error.
fn worst_fd_error(inputs: &[Tensor<f64>], build: &BuildFn) -> f64 {
    let h = 1e-5;
    let eval = |vals: &[Tensor<f64>]| {
        let mut t = Tape::<f64>::new();
        let vars: Vec<Var> = vals.iter().map(|v| t.param(v.clone()).unwrap()).collect();
        let l = build(&mut t, &vars).unwrap();
        t.value(l).item()
    };
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|v| tape.param(v.clone()).unwrap())
        .collect();
    let loss = build(&mut tape, &vars).unwrap();
    tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).unwrap().clone();
        let mut buf = inputs.to_vec();
        for i in 0..inputs[k].numel() {
            let x = inputs[k].data()[i];
            buf[k].data_mut()[i] = x + h;
            let plus = eval(&buf);
            buf[k].data_mut()[i] = x - h;
            let minus = eval(&buf);
            buf[k].data_mut()[i] = x;
            worst = worst.max(rel_err(analytic.data()[i], (plus - minus) / (2.0 * h)));
        }
    }
    worst
}

/// Weighted sum of `v` so every output element reaches the scalar loss.
fn contract(t: &mut Tape<f64>, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(t.value(v).shape(), &mut rng);
    let w = t.constant(w)?;
    let p = t.mul(v, w)?;
    t.sum(p)
}

fn gradient_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let soft = {
        let raw = random(&[3, 4], &mut rng).map(|v| v.exp());
        let rows: Vec<f64> = raw
            .data()
            .chunks(4)
            .flat_map(|r| {
                let s: f64 = r.iter().sum();
                r.iter().map(move |v| v / s).collect::<Vec<_>>()
            })
            .collect();
        Tensor::new(vec![3, 4], rows).unwrap()
    };
    let teacher = soft.clone();
    let cases: Vec<(&str, Vec<Tensor<f64>>, Build)> = vec![
        (
            "conv2d",
            vec![
                random(&[2, 2, 5, 5], &mut rng),
                random(&[3, 2, 3, 3], &mut rng),
                random(&[3], &mut rng),
            ],
            Box::new(|t, v| {
                let y = t.conv2d(v[0], v[1], v[2], 1, 1)?;
                contract(t, y, 1)
            }),
        ),
        (
            "conv2d stride 2",
            vec![
                random(&[1, 2, 6, 6], &mut rng),
                random(&[2, 2, 3, 3], &mut rng),
                random(&[2], &mut rng),
            ],
            Box::new(|t, v| {
                let y = t.conv2d(v[0], v[1], v[2], 2, 0)?;
                contract(t, y, 2)
            }),
        ),
        (
            "maxpool2d",
            vec![random(&[2, 2, 4, 4], &mut rng)],
            Box::new(|t, v| {
                let y = t.maxpool2d(v[0], 2, 2)?;
                contract(t, y, 3)
            }),
        ),
        (
            "relu",
            vec![random(&[4, 5], &mut rng)],
            Box::new(|t, v| {
                let y = t.relu(v[0])?;
                contract(t, y, 4)
            }),
        ),
        (
            "reshape+flatten",
            vec![random(&[2, 3, 2, 2], &mut rng)],
            Box::new(|t, v| {
                let y = t.flatten(v[0])?;
                let y = t.reshape(y, vec![4, 6])?;
                contract(t, y, 5)
            }),
        ),
        (
            "linear",
            vec![
                random(&[3, 5], &mut rng),
                random(&[5, 4], &mut rng),
                random(&[4], &mut rng),
            ],
            Box::new(|t, v| {
                let y = t.linear(v[0], v[1], v[2])?;
                contract(t, y, 6)
            }),
        ),
        (
            "softmax",
            vec![random(&[3, 4], &mut rng)],
            Box::new(|t, v| {
                let y = t.softmax(v[0])?;
                contract(t, y, 7)
            }),
        ),
        (
            "log_softmax",
            vec![random(&[3, 4], &mut rng)],
            Box::new(|t, v| {
                let y = t.log_softmax(v[0])?;
                contract(t, y, 8)
            }),
        ),
        (
            "add+mul+scale",
            vec![random(&[3, 3], &mut rng), random(&[3, 3], &mut rng)],
            Box::new(|t, v| {
                let a = t.add(v[0], v[1])?;
                let m = t.mul(a, v[0])?;
                let s = t.scale(m, 0.7)?;
                contract(t, s, 9)
            }),
        ),
        (
            "mean",
            vec![random(&[2, 5], &mut rng)],
            Box::new(|t, v| {
                let m = t.mul(v[0], v[0])?;
                t.mean(m)
            }),
        ),
        (
            "cross_entropy hard",
            vec![random(&[3, 4], &mut rng)],
            Box::new(|t, v| t.cross_entropy_ls(v[0], Targets::Hard(&[0, 3, 1]), 0.1)),
        ),
        (
            "cross_entropy soft",
            vec![random(&[3, 4], &mut rng)],
            Box::new(move |t, v| t.cross_entropy_ls(v[0], Targets::Soft(&soft), 0.0)),
        ),
        (
            "soft_target_kl",
            vec![random(&[3, 4], &mut rng)],
            Box::new(move |t, v| t.soft_target_kl(v[0], &teacher, 4.0)),
        ),
    ];
    let mut worst = (0.0_f64, "");
    for (name, inputs, build) in &cases {
        let e = worst_fd_error(inputs, build.as_ref());
        if e > worst.0 {
            worst = (e, name);
        }
    }

    let model = build_tiny_cnn::<f64>().unwrap().initialized(3);
    let x = Tensor::from_fn(vec![2, 1, 28, 28], |i| {
        ((i * 37) % 101) as f64 / 101.0 - 0.5
    });
    let labels = [2usize, 7];
    let model_err = model_fd_error(&model, &x, &labels);
    outcome(
        worst.0 <= 1e-4 && model_err <= 1e-4,
        format!(
            "{} ops, worst rel error {:.2e} ({}), TinyCNN loss {:.2e} (≤ 1e-4)",
            cases.len(),
            worst.0,
            worst.1,
            model_err
        ),
    )
}

/// Central differences of the TinyCNN cross-entropy over every parameter
/// element, compared with the gradients the tape assigns to the model's own
/// parameter leaves.
fn model_fd_error(model: &ModelGraph<f64>, x: &Tensor<f64>, labels: &[usize]) -> f64 {
    let loss_of = |m: &ModelGraph<f64>| {
        let mut t = Tape::<f64>::new();
        let (logits, _) = m.forward_tape(&mut t, x).unwrap();
        let l = t
            .cross_entropy_ls(logits, Targets::Hard(labels), 0.1)
            .unwrap();
        t.value(l).item()
    };
    let mut tape = Tape::<f64>::new();
    let (logits, pv) = model.forward_tape(&mut tape, x).unwrap();
    let l = tape
        .cross_entropy_ls(logits, Targets::Hard(labels), 0.1)
        .unwrap();
    tape.backward(l).unwrap();
    let analytic: Vec<Tensor<f64>> = pv
        .iter()
        .flat_map(|p| [p.weight, p.bias])
        .map(|v| tape.grad(v).unwrap().clone())
        .collect();

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut m = model.clone();
    for (k, grad) in analytic.iter().enumerate() {
        for i in 0..grad.numel() {
            let x0 = m.params_mut()[k].data()[i];
            m.params_mut()[k].data_mut()[i] = x0 + h;
            let plus = loss_of(&m);
            m.params_mut()[k].data_mut()[i] = x0 - h;
            let minus = loss_of(&m);
            m.params_mut()[k].data_mut()[i] = x0;
            worst = worst.max(rel_err(grad.data()[i], (plus - minus) / (2.0 * h)));
        }
    }
    worst
}

// ------------------------------------------------------ prune equals mask

fn random_plan<T: dsfp::Real>(model: &ModelGraph<T>, rng: &mut ChaCha8Rng) -> PrunePlan {
    let direction = if rng.random() {
        Direction::PruneHighest
    } else {
        Direction::PruneLowest
    };
    let layers = model
        .filter_counts()
        .into_iter()
        .enumerate()
        .map(|(conv, f)| {
            let ratio = 5.0 * rng.random_range(0..=18) as f64;
            let imps: Vec<f64> = (0..f).map(|_| rng.random()).collect();
            LayerPlan {
                conv,
                ratio,
                kept: rank_filters(&imps, ratio, direction).unwrap(),
            }
        })
        .collect();
    PrunePlan { layers, direction }
}

fn prune_equals_mask() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let tiny = build_tiny_cnn::<f32>().unwrap().initialized(1);
    let alex = build_alexnet_cifar::<f32>().unwrap().initialized(2);
    let tiny_probe = Tensor::from_fn(vec![4, 1, 28, 28], |_| rng.random_range(0.0..1.0f32));
    let alex_probe = Tensor::from_fn(vec![2, 3, 32, 32], |_| rng.random_range(0.0..1.0f32));
    let mut worst = 0.0f32;
    for i in 0..100 {
        let d = if i % 2 == 0 {
            let plan = random_plan(&tiny, &mut rng);
            mask_equivalence_check(&tiny, &plan, &tiny_probe).unwrap()
        } else {
            let plan = random_plan(&alex, &mut rng);
            mask_equivalence_check(&alex, &plan, &alex_probe).unwrap()
        };
        worst = worst.max(d);
    }
    outcome(
        worst <= 1e-5,
        format!("100 plans (50 TinyCNN, 50 AlexNet), max |pruned − masked| = {worst:.2e} (≤ 1e-5)"),
    )
}

// ------------------------------------------------------------- accounting

/// Hand-derived counts for TinyCNN with `a` and `b` surviving filters.
fn tiny_closed_form(a: u64, b: u64) -> (u64, u64) {
    let params = a * 10 + b * (9 * a + 1) + 49 * b * 10 + 10;
    let macs = 784 * 9 * a + 196 * 9 * a * b + 490 * b;
    (params, macs)
}

/// Hand-derived counts for AlexNet-CIFAR with surviving widths `w`.
fn alex_closed_form(w: [u64; 5]) -> (u64, u64) {
    let ins = [3, w[0], w[1], w[2], w[3]];
    let conv_params: u64 = (0..5).map(|i| w[i] * (9 * ins[i] + 1)).sum();
    let fc_params = 16 * w[4] * 1024 + 1024 + 1024 * 512 + 512 + 512 * 10 + 10;
    let planes = [1024, 256, 64, 64, 64];
    let conv_macs: u64 = (0..5).map(|i| planes[i] * 9 * ins[i] * w[i]).sum();
    let fc_macs = 16 * w[4] * 1024 + 1024 * 512 + 5120;
    (conv_params + fc_params, conv_macs + fc_macs)
}

fn accounting() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let tiny = build_tiny_cnn::<f32>().unwrap().initialized(1);
    let alex = build_alexnet_cifar::<f32>().unwrap();
    let mut mismatches = 0;
    let mut plans = 0;
    for _ in 0..40 {
        for model in [&tiny, &alex] {
            let plan = random_plan(model, &mut rng);
            let (pruned, delta) = apply_prune(model, &plan).unwrap();
            let w: Vec<u64> = pruned.filter_counts().iter().map(|&f| f as u64).collect();
            let want = if w.len() == 2 {
                tiny_closed_form(w[0], w[1])
            } else {
                alex_closed_form(w.clone().try_into().unwrap())
            };
            let got = (
                count_params(&pruned).total,
                count_flops(&pruned).unwrap().total_macs,
            );
            if got != want || (delta.params_after, delta.macs_after) != want {
                mismatches += 1;
            }
            plans += 1;
        }
    }
    let mut monotone = true;
    for model in [&tiny, &alex] {
        let mut last = (u64::MAX, u64::MAX);
        for step in 0..=18 {
            let ratio = 5.0 * step as f64;
            let plan = PrunePlan {
                layers: model
                    .filter_counts()
                    .into_iter()
                    .enumerate()
                    .map(|(conv, f)| LayerPlan {
                        conv,
                        ratio,
                        kept: rank_filters(&vec![0.5; f], ratio, Direction::PruneHighest).unwrap(),
                    })
                    .collect(),
                direction: Direction::PruneHighest,
            };
            let (p, _) = apply_prune(model, &plan).unwrap();
            let now = (count_params(&p).total, count_flops(&p).unwrap().total_macs);
            monotone &= now.0 <= last.0 && now.1 <= last.1;
            last = now;
        }
    }
    let (full_p, full_m) = tiny_closed_form(8, 16);
    let anchors = (
        count_params(&tiny).total,
        count_flops(&tiny).unwrap().total_macs,
    ) == (full_p, full_m);
    outcome(
        mismatches == 0 && monotone && anchors,
        format!("{plans} plans, {mismatches} recount mismatches, monotone in ratio: {monotone}"),
    )
}

// ------------------------------------------------------------- controller

fn controller() -> Outcome {
    let optimum = 50.0;
    let layers = 3;
    let hits = (0..20u64)
        .filter(|&seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xBEEF);
            let mut oracle = |ratios: &[f64]| -> Result<f64> {
                let fit: f64 = ratios
                    .iter()
                    .map(|r| 1.0 - ((r - optimum) / 20.0).powi(2))
                    .sum::<f64>()
                    / ratios.len() as f64;
                Ok(fit + 0.02 * (rng.random::<f64>() - 0.5))
            };
            let cfg = ControllerConfig {
                episodes: 200,
                seed,
                ..Default::default()
            };
            let res = run_search(layers, &cfg, &mut oracle).unwrap();
            res.ratios.iter().all(|r| (r - optimum).abs() <= 5.0)
        })
        .count();
    outcome(
        hits >= 19,
        format!("{hits}/20 seeds within ±5 of the optimum after 200 episodes (≥ 19)"),
    )
}

// ------------------------------------------------------ scheduler/optim

fn scheduler_optimizer() -> Outcome {
    let (t0, mult, hi, lo) = (10usize, 2usize, 0.1, 0.001);
    let mut exact = true;
    let (mut start, mut len) = (0usize, t0);
    for epoch in 0..310 {
        if epoch == start + len {
            start += len;
            len *= mult;
        }
        let want = lo
            + 0.5
                * (hi - lo)
                * (1.0 + (std::f64::consts::PI * (epoch - start) as f64 / len as f64).cos());
        exact &= cosine_warm_restarts(epoch, t0, mult, hi, lo) == want;
    }
    let restarts = [0, 10, 30, 70, 150]
        .iter()
        .all(|&e| cosine_warm_restarts(e, t0, mult, hi, lo) == hi);

    let one = |v: f64| Tensor::new(vec![1], vec![v]).unwrap();
    let (w0, g, lr, wd, mu) = (0.8, 0.3, 0.05, 0.01, 0.9);
    let mut sgd = Sgd::<f64>::new(mu, wd);
    let mut w = one(w0);
    sgd.step(&mut [&mut w], &[one(g)], lr).unwrap();
    let v1 = g + wd * w0;
    let sgd1 = (w.item() - (w0 - lr * v1)).abs();
    let w1 = w.item();
    sgd.step(&mut [&mut w], &[one(g)], lr).unwrap();
    let sgd2 = (w.item() - (w1 - lr * (mu * v1 + g + wd * w1))).abs();

    let mut adam = AdamW::<f64>::new(wd);
    let mut w = one(w0);
    adam.step(&mut [&mut w], &[one(g)], lr).unwrap();
    let adam1 = (w.item() - (w0 * (1.0 - lr * wd) - lr * g / (g.abs() + 1e-8))).abs();

    let worst = sgd1.max(sgd2).max(adam1);
    outcome(
        exact && restarts && worst <= 1e-6,
        format!("310 epochs exact: {exact}, restarts at lr_max: {restarts}, worst optimizer step error {worst:.1e} (≤ 1e-6)"),
    )
}

// -------------------------------------------------------- desk-scale E2E

struct PruneRun {
    ratio: f64,
    direction: Direction,
    acc: f64,
    flops_reduction: f64,
}

fn desk_e2e() -> Vec<(String, Outcome)> {
    let seed = 2024;
    let ds = synthetic_blobs(10_000, 10, [1, 28, 28], seed).unwrap();
    let (pool, test) = ds.split_validation(0.2, seed).unwrap();
    let init = build_tiny_cnn::<f32>().unwrap().initialized(seed);
    let tcfg = TrainConfig {
        epochs: 15,
        seed,
        ..Default::default()
    };
    let (baseline, report) = train(&init, &pool, &tcfg).unwrap();
    let base_val = report.best_val_acc;
    let base_test = evaluate(&baseline, &test).unwrap();

    let calib = CalibrationSet::from_dataset(&pool, 8, 64, seed).unwrap();
    let scores = score_model(&baseline, &calib, KlMode::MaskedOutput).unwrap();
    let base_flops = count_flops(&baseline).unwrap().total_flops as f64;
    let kd = KdConfig {
        epochs: 30,
        seed,
        ..Default::default()
    };

    let jobs: Vec<(f64, Direction)> = [50.0, 70.0]
        .into_iter()
        .flat_map(|r| [(r, Direction::PruneHighest), (r, Direction::PruneLowest)])
        .collect();
    let runs: Vec<PruneRun> = std::thread::scope(|s| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|&(ratio, direction)| {
                let (baseline, scores, pool, test, kd) = (&baseline, &scores, &pool, &test, &kd);
                s.spawn(move || {
                    let ratios = vec![ratio; baseline.conv_layers().len()];
                    let plan = plan_from_scores(baseline, scores, &ratios, direction).unwrap();
                    let (pruned, _) = apply_prune(baseline, &plan).unwrap();
                    let (student, _) = distill(&pruned, baseline, pool, kd).unwrap();
                    let flops = count_flops(&student).unwrap().total_flops as f64;
                    PruneRun {
                        ratio,
                        direction,
                        acc: evaluate(&student, test).unwrap(),
                        flops_reduction: 100.0 * (1.0 - flops / base_flops),
                    }
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });

    let mut out = vec![(
        "desk e2e baseline".to_string(),
        outcome(
            base_val >= 0.95,
            format!(
                "val accuracy {:.2}% (≥ 95%), test {:.2}%",
                100.0 * base_val,
                100.0 * base_test
            ),
        ),
    )];
    for r in &runs {
        let retention = 100.0 * r.acc / base_test;
        let name = format!("desk e2e {}% {}", r.ratio, r.direction);
        if r.direction == Direction::default() {
            let need = if r.ratio == 50.0 { 95.0 } else { 90.0 };
            out.push((
                name,
                outcome(
                    retention >= need,
                    format!(
                        "retention {retention:.2}% (≥ {need}%), FLOPs −{:.1}%",
                        r.flops_reduction
                    ),
                ),
            ));
            if r.ratio == 70.0 {
                out.push((
                    "desk e2e FLOPs reduction at 70%".into(),
                    outcome(
                        r.flops_reduction >= 50.0,
                        format!("{:.2}% (≥ 50%)", r.flops_reduction),
                    ),
                ));
            }
        } else {
            out.push((
                name,
                outcome(
                    true,
                    format!(
                        "reported for comparison: retention {retention:.2}%, FLOPs −{:.1}%",
                        r.flops_reduction
                    ),
                ),
            ));
        }
    }
    let both = runs.iter().any(|r| r.direction == Direction::PruneHighest)
        && runs.iter().any(|r| r.direction == Direction::PruneLowest);
    out.push((
        "desk e2e both directions emitted".into(),
        outcome(both, "prune_highest and prune_lowest at 50% and 70%"),
    ));
    out
}

// -------------------------------------------------------- reproducibility

fn reproducibility() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let text = format!(
            "seed = 9\ndataset.samples = 600\ntrain.epochs = 4\nkd.epochs = 2\ncontroller.episodes = 8\noutput.dir = {}\n",
            out.display()
        );
        run_stage(Stage::Pipeline, &RunConfig::parse(&text).unwrap()).unwrap();
        std::fs::read(out.join("report.json")).unwrap()
    };
    let (a, b) = (run("a"), run("b"));
    outcome(
        a == b,
        format!(
            "two runs, {} and {} bytes, identical: {}",
            a.len(),
            b.len(),
            a == b
        ),
    )
}

// ----------------------------------------------------------- data formats

fn data_formats() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut shard = vec![0u8; 30_730_000];
    for rec in shard.chunks_mut(3073) {
        rng.fill(&mut rec[1..]);
        rec[0] = rng.random_range(0..10);
    }
    let ds = parse_cifar10_binary(&shard).unwrap();
    let cifar_ok = ds.len() == 10_000 && encode_cifar10_binary(&ds).unwrap() == shard;

    let src = synthetic_blobs(50, 10, [1, 28, 28], 4).unwrap();
    let (im, lb) = encode_mnist_idx(&src).unwrap();
    let back: Dataset = parse_mnist_idx(&im, &lb).unwrap();
    let (im2, lb2) = encode_mnist_idx(&back).unwrap();
    let mnist_ok = im == im2 && lb == lb2 && back.len() == 50 && back.labels() == src.labels();
    outcome(
        cifar_ok && mnist_ok,
        format!(
            "cifar {} bytes -> {} samples, mnist idx roundtrip bit-exact: {mnist_ok}",
            shard.len(),
            ds.len()
        ),
    )
}

fn main() {
    let started = Instant::now();
    let mut results = vec![
        line("architecture anchors", secs(1), anchors),
        line("fusion formula", secs(1), fusion),
        line("gradient suite", secs(60), gradient_suite),
        line("prune equals mask", secs(120), prune_equals_mask),
        line("accounting", secs(10), accounting),
        line("controller convergence", secs(60), controller),
        line("scheduler and optimizer", secs(1), scheduler_optimizer),
    ];
    let t = Instant::now();
    let e2e = desk_e2e();
    let e2e_took = t.elapsed();
    for (name, o) in e2e {
        results.push(line(&name, secs(900), || o));
    }
    results.push(line("desk e2e runtime", secs(900), || {
        outcome(e2e_took < secs(900), format!("{e2e_took:.1?} (< 15 min)"))
    }));
    results.push(line("reproducibility", secs(120), reproducibility));
    results.push(line("data formats", secs(10), data_formats));

    let failed = results.iter().filter(|p| !**p).count();
    println!(
        "{} criteria, {failed} failed, {:.1?}",
        results.len(),
        started.elapsed()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
