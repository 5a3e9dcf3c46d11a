use super::ops;
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Classification targets for the cross-entropy op.
#[derive(Clone, Copy, Debug)]
pub enum Targets<'a, T> {
    Hard(&'a [usize]),
    /// One probability row per sample, e.g. mixup labels.
    Soft(&'a Tensor<T>),
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Relu {
        input: Var,
    },
    Reshape {
        input: Var,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Softmax {
        input: Var,
    },
    LogSoftmax {
        input: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: T,
    },
    Sum {
        input: Var,
    },
    Mean {
        input: Var,
    },
    CrossEntropy {
        logits: Var,
        target: Tensor<T>,
        probs: Tensor<T>,
    },
    SoftTargetKl {
        logits: Var,
        target: Tensor<T>,
        probs: Tensor<T>,
        temperature: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracks_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Wengert list of executed ops. Values are owned by the tape; callers hold
/// [`Var`] handles.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    checked: bool,
    backward_done: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    /// A tape that rejects NaN/Inf at every op boundary.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            checked: true,
            backward_done: false,
        }
    }

    pub fn unchecked() -> Self {
        Tape {
            checked: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward pass with respect to `v`, if `v` is
    /// reachable from a `requires_grad` leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push("leaf", value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    fn tracks(&self, v: Var) -> bool {
        self.nodes[v.0].tracks_grad
    }

    fn push(
        &mut self,
        name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        tracks_grad: bool,
    ) -> Result<Var> {
        if self.checked && !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            tracks_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let out = ops::conv2d(
            self.value(input),
            self.value(weight),
            self.value(bias),
            stride,
            pad,
        )?;
        let tracks = self.tracks(input) || self.tracks(weight) || self.tracks(bias);
        self.push(
            "conv2d",
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
            tracks,
        )
    }

    pub fn maxpool2d(&mut self, input: Var, k: usize, stride: usize) -> Result<Var> {
        let ops::MaxPoolOutput { output, argmax } = ops::maxpool2d(self.value(input), k, stride)?;
        let tracks = self.tracks(input);
        self.push("maxpool2d", output, Op::MaxPool { input, argmax }, tracks)
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let out = ops::relu(self.value(input));
        let tracks = self.tracks(input);
        self.push("relu", out, Op::Relu { input }, tracks)
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(input).clone().reshape(shape)?;
        let tracks = self.tracks(input);
        self.push("reshape", out, Op::Reshape { input }, tracks)
    }

    /// Collapses every axis after the first.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let shape = self.value(input).shape();
        let n = shape.first().copied().unwrap_or(1);
        let rest = shape.iter().skip(1).product();
        self.reshape(input, vec![n, rest])
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = ops::linear(self.value(input), self.value(weight), self.value(bias))?;
        let tracks = self.tracks(input) || self.tracks(weight) || self.tracks(bias);
        self.push(
            "linear",
            out,
            Op::Linear {
                input,
                weight,
                bias,
            },
            tracks,
        )
    }

    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let out = ops::softmax(self.value(input))?;
        let tracks = self.tracks(input);
        self.push("softmax", out, Op::Softmax { input }, tracks)
    }

    pub fn log_softmax(&mut self, input: Var) -> Result<Var> {
        let out = ops::log_softmax(self.value(input))?;
        let tracks = self.tracks(input);
        self.push("log_softmax", out, Op::LogSoftmax { input }, tracks)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let tracks = self.tracks(a) || self.tracks(b);
        self.push("add", out, Op::Add { a, b }, tracks)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let tracks = self.tracks(a) || self.tracks(b);
        self.push("mul", out, Op::Mul { a, b }, tracks)
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Result<Var> {
        let out = self.value(input).map(|v| v * factor);
        let tracks = self.tracks(input);
        self.push("scale", out, Op::Scale { input, factor }, tracks)
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(input).sum());
        let tracks = self.tracks(input);
        self.push("sum", out, Op::Sum { input }, tracks)
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let v = self.value(input);
        let out = Tensor::scalar(v.sum() / T::of(v.numel() as f64));
        let tracks = self.tracks(input);
        self.push("mean", out, Op::Mean { input }, tracks)
    }

    /// Batch-mean cross-entropy against label-smoothed targets
    /// `(1 − eps)·target + eps/C`.
    pub fn cross_entropy_ls(
        &mut self,
        logits: Var,
        targets: Targets<'_, T>,
        eps_ls: f64,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&eps_ls) {
            return Err(Error::InvalidArgument(format!(
                "label smoothing {eps_ls} outside [0, 1)"
            )));
        }
        let z = self.value(logits);
        if z.rank() != 2 {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits must be N×C, got {:?}", z.shape()),
            ));
        }
        let (n, c) = (z.dim(0), z.dim(1));
        let mut target = match targets {
            Targets::Hard(labels) => {
                if labels.len() != n {
                    return Err(Error::shape(
                        "cross_entropy",
                        format!("{} labels for {n} rows", labels.len()),
                    ));
                }
                let mut t = Tensor::zeros(vec![n, c]);
                for (i, &y) in labels.iter().enumerate() {
                    if y >= c {
                        return Err(Error::InvalidArgument(format!(
                            "class index {y} out of range for {c} classes"
                        )));
                    }
                    t.data_mut()[i * c + y] = T::one();
                }
                t
            }
            Targets::Soft(t) => {
                if t.shape() != [n, c] {
                    return Err(Error::shape(
                        "cross_entropy",
                        format!("soft labels {:?} vs logits {:?}", t.shape(), [n, c]),
                    ));
                }
                for row in t.data().chunks(c) {
                    let s: f64 = row.iter().map(|v| v.f64()).sum();
                    if (s - 1.0).abs() > 1e-5 || row.iter().any(|v| *v < T::zero()) {
                        return Err(Error::InvalidArgument(format!(
                            "soft label row sums to {s}"
                        )));
                    }
                }
                t.clone()
            }
        };
        if eps_ls > 0.0 {
            let (keep, spread) = (T::of(1.0 - eps_ls), T::of(eps_ls / c as f64));
            for v in target.data_mut() {
                *v = keep * *v + spread;
            }
        }
        let logp = ops::log_softmax(z)?;
        let probs = ops::softmax(z)?;
        let total: T = logp
            .data()
            .iter()
            .zip(target.data())
            .map(|(&lp, &q)| if q == T::zero() { T::zero() } else { q * lp })
            .sum();
        let loss = Tensor::scalar(-total / T::of(n as f64));
        let tracks = self.tracks(logits);
        self.push(
            "cross_entropy",
            loss,
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
            tracks,
        )
    }

    /// `T² · mean_n KL(target ∥ softmax(logits / T))` where `target` rows are
    /// fixed probability vectors (teacher outputs at the same temperature).
    pub fn soft_target_kl(
        &mut self,
        logits: Var,
        target: &Tensor<T>,
        temperature: T,
    ) -> Result<Var> {
        let z = self.value(logits);
        if z.rank() != 2 || target.shape() != z.shape() {
            return Err(Error::shape(
                "soft_target_kl",
                format!("logits {:?} vs targets {:?}", z.shape(), target.shape()),
            ));
        }
        if temperature.is_nan() || temperature <= T::zero() {
            return Err(Error::InvalidArgument(format!(
                "temperature {temperature} must be positive"
            )));
        }
        let n = z.dim(0);
        let scaled = z.map(|v| v / temperature);
        let logq = ops::log_softmax(&scaled)?;
        let probs = ops::softmax(&scaled)?;
        let total: T = target
            .data()
            .iter()
            .zip(logq.data())
            .map(|(&p, &lq)| {
                if p > T::zero() {
                    p * (p.ln() - lq)
                } else {
                    T::zero()
                }
            })
            .sum();
        let loss = Tensor::scalar(temperature * temperature * total / T::of(n as f64));
        let tracks = self.tracks(logits);
        self.push(
            "soft_target_kl",
            loss,
            Op::SoftTargetKl {
                logits,
                target: target.clone(),
                probs,
                temperature,
            },
            tracks,
        )
    }

    /// Populates gradients of `loss` with respect to every tracked node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(shape));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].tracks_grad {
                continue;
            }
            for (input, d) in self.input_grads(id, &g)? {
                if !self.nodes[input.0].tracks_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&d),
                    slot @ None => *slot = Some(d),
                }
            }
            self.nodes[id].grad = Some(g);
        }
        Ok(())
    }

    fn input_grads(&self, id: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[id];
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            } => {
                let need_input = self.tracks(*input);
                let (dx, dw, db) = ops::conv2d_backward(
                    self.value(*input),
                    self.value(*weight),
                    g,
                    *stride,
                    *pad,
                    need_input,
                )?;
                let mut v = vec![(*weight, dw), (*bias, db)];
                if let Some(dx) = dx {
                    v.push((*input, dx));
                }
                v
            }
            Op::MaxPool { input, argmax } => {
                vec![(
                    *input,
                    ops::maxpool2d_backward(self.value(*input).shape(), argmax, g),
                )]
            }
            Op::Relu { input } => {
                let x = self.value(*input);
                let data = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xv, &gv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                vec![(*input, Tensor::new(x.shape().to_vec(), data)?)]
            }
            Op::Reshape { input } => {
                vec![(
                    *input,
                    g.clone().reshape(self.value(*input).shape().to_vec())?,
                )]
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let (dx, dw, db) = ops::linear_backward(self.value(*input), self.value(*weight), g);
                vec![(*input, dx), (*weight, dw), (*bias, db)]
            }
            Op::Softmax { input } => {
                let y = &node.value;
                let c = y.dim(1);
                let mut dx = Vec::with_capacity(y.numel());
                for (yr, gr) in y.data().chunks(c).zip(g.data().chunks(c)) {
                    let inner: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(&a, &b)| a * (b - inner)));
                }
                vec![(*input, Tensor::new(y.shape().to_vec(), dx)?)]
            }
            Op::LogSoftmax { input } => {
                let y = &node.value;
                let c = y.dim(1);
                let mut dx = Vec::with_capacity(y.numel());
                for (yr, gr) in y.data().chunks(c).zip(g.data().chunks(c)) {
                    let total: T = gr.iter().copied().sum();
                    dx.extend(yr.iter().zip(gr).map(|(&a, &b)| b - a.exp() * total));
                }
                vec![(*input, Tensor::new(y.shape().to_vec(), dx)?)]
            }
            Op::Add { a, b } => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let da = vb
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&y, &gv)| y * gv)
                    .collect();
                let db = va
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gv)| x * gv)
                    .collect();
                vec![
                    (*a, Tensor::new(va.shape().to_vec(), da)?),
                    (*b, Tensor::new(vb.shape().to_vec(), db)?),
                ]
            }
            Op::Scale { input, factor } => vec![(*input, g.map(|v| v * *factor))],
            Op::Sum { input } => {
                vec![(
                    *input,
                    Tensor::full(self.value(*input).shape().to_vec(), g.item()),
                )]
            }
            Op::Mean { input } => {
                let x = self.value(*input);
                let v = g.item() / T::of(x.numel() as f64);
                vec![(*input, Tensor::full(x.shape().to_vec(), v))]
            }
            Op::CrossEntropy {
                logits,
                target,
                probs,
            } => {
                let c = probs.dim(1);
                let scale = g.item() / T::of(probs.dim(0) as f64);
                let mut dx = Vec::with_capacity(probs.numel());
                for (pr, qr) in probs.data().chunks(c).zip(target.data().chunks(c)) {
                    let mass: T = qr.iter().copied().sum();
                    dx.extend(pr.iter().zip(qr).map(|(&p, &q)| (p * mass - q) * scale));
                }
                vec![(*logits, Tensor::new(probs.shape().to_vec(), dx)?)]
            }
            Op::SoftTargetKl {
                logits,
                target,
                probs,
                temperature,
            } => {
                let c = probs.dim(1);
                let scale = g.item() * *temperature / T::of(probs.dim(0) as f64);
                let mut dx = Vec::with_capacity(probs.numel());
                for (qr, pr) in probs.data().chunks(c).zip(target.data().chunks(c)) {
                    let mass: T = pr.iter().copied().sum();
                    dx.extend(qr.iter().zip(pr).map(|(&q, &p)| (q * mass - p) * scale));
                }
                vec![(*logits, Tensor::new(probs.shape().to_vec(), dx)?)]
            }
        };
        Ok(out)
    }
}
