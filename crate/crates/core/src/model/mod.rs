//! Layer graphs, forward execution, parameter/MAC accounting, and
//! checkpoint persistence.

mod accounting;
mod checkpoint;
mod zoo;

pub use accounting::{count_flops, count_params, FlopCount, LayerCost, ParamCount};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use zoo::{build_alexnet_cifar, build_by_name, build_tiny_cnn, build_vgg16_cifar};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::tensor::{self, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        filters: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    MaxPool {
        size: usize,
        stride: usize,
    },
    Flatten,
    Linear {
        in_features: usize,
        out_features: usize,
    },
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Linear { .. } => "linear",
        }
    }

    fn weight_shape(&self) -> Option<(Vec<usize>, usize)> {
        match *self {
            LayerSpec::Conv {
                in_channels,
                filters,
                kernel,
                ..
            } => Some((vec![filters, in_channels, kernel, kernel], filters)),
            LayerSpec::Linear {
                in_features,
                out_features,
            } => Some((vec![in_features, out_features], out_features)),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T = f32> {
    pub spec: LayerSpec,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub arch: String,
    pub input_shape: [usize; 3],
    pub class_count: usize,
}

/// Output shape of one layer: `[C, H, W]` for feature maps, `[D]` after
/// flattening.
pub type ActivationShape = Vec<usize>;

/// Per-conv-layer channel keep masks used by masked forwarding; `None` keeps
/// every channel of that layer.
pub type ChannelMasks = [Option<Vec<bool>>];

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph<T = f32> {
    pub meta: ModelMeta,
    pub layers: Vec<Layer<T>>,
    pub norm: NormStats,
    /// Free-form training history carried through checkpoints.
    pub history: serde_json::Value,
}

/// Tape handles for one parameterized layer.
#[derive(Clone, Copy, Debug)]
pub struct ParamVars {
    pub layer: usize,
    pub weight: Var,
    pub bias: Var,
}

impl<T: Real> ModelGraph<T> {
    /// Builds a graph with zero-valued parameters after shape-checking it.
    pub fn from_specs(meta: ModelMeta, specs: Vec<LayerSpec>) -> Result<Self> {
        let layers = specs
            .into_iter()
            .map(|spec| {
                let (weight, bias) = match spec.weight_shape() {
                    Some((w, b)) => (Some(Tensor::zeros(w)), Some(Tensor::zeros(vec![b]))),
                    None => (None, None),
                };
                Layer { spec, weight, bias }
            })
            .collect();
        let norm = NormStats::identity(meta.input_shape[0]);
        let model = ModelGraph {
            meta,
            layers,
            norm,
            history: serde_json::Value::Null,
        };
        model.infer_shapes()?;
        Ok(model)
    }

    /// He-normal weights, zero biases.
    pub fn initialized(mut self, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut self.layers {
            let fan_in = match layer.spec {
                LayerSpec::Conv {
                    in_channels,
                    kernel,
                    ..
                } => in_channels * kernel * kernel,
                LayerSpec::Linear { in_features, .. } => in_features,
                _ => continue,
            };
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
            if let Some(w) = layer.weight.as_mut() {
                for v in w.data_mut() {
                    *v = T::of(normal.sample(&mut rng));
                }
            }
            if let Some(b) = layer.bias.as_mut() {
                b.data_mut().iter_mut().for_each(|v| *v = T::zero());
            }
        }
        self
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    /// Symbolic shape propagation; fails on any inconsistency.
    pub fn infer_shapes(&self) -> Result<Vec<ActivationShape>> {
        let mut cur: ActivationShape = self.meta.input_shape.to_vec();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let bad = |detail: String| {
                Error::shape(
                    "model",
                    format!("layer {i} ({}): {detail}", layer.spec.kind()),
                )
            };
            cur = match layer.spec {
                LayerSpec::Conv {
                    in_channels,
                    filters,
                    kernel,
                    stride,
                    pad,
                } => {
                    let [c, h, w] = cur[..] else {
                        return Err(bad(format!("expects a feature map, got {cur:?}")));
                    };
                    if c != in_channels {
                        return Err(bad(format!(
                            "in_channels {in_channels} but predecessor has {c}"
                        )));
                    }
                    if filters == 0 {
                        return Err(bad("zero filters".into()));
                    }
                    let ho = tensor::conv2d_output_dims(h, kernel, stride, pad)
                        .ok_or_else(|| bad("kernel does not fit".into()))?;
                    let wo = tensor::conv2d_output_dims(w, kernel, stride, pad)
                        .ok_or_else(|| bad("kernel does not fit".into()))?;
                    vec![filters, ho, wo]
                }
                LayerSpec::Relu => cur,
                LayerSpec::MaxPool { size, stride } => {
                    let [c, h, w] = cur[..] else {
                        return Err(bad(format!("expects a feature map, got {cur:?}")));
                    };
                    if stride == 0
                        || size == 0
                        || h % stride != 0
                        || w % stride != 0
                        || size > h
                        || size > w
                    {
                        return Err(bad(format!("pool {size}/{stride} does not tile {h}x{w}")));
                    }
                    vec![c, (h - size) / stride + 1, (w - size) / stride + 1]
                }
                LayerSpec::Flatten => {
                    let d = cur
                        .iter()
                        .try_fold(1usize, |a, &b| a.checked_mul(b))
                        .ok_or_else(|| bad("feature count overflows".into()))?;
                    vec![d]
                }
                LayerSpec::Linear {
                    in_features,
                    out_features,
                } => {
                    let [d] = cur[..] else {
                        return Err(bad(format!("expects flat features, got {cur:?}")));
                    };
                    if d != in_features {
                        return Err(bad(format!(
                            "in_features {in_features} but predecessor has {d}"
                        )));
                    }
                    vec![out_features]
                }
            };
            if let (Some((ws, bs)), Some(w), Some(b)) =
                (layer.spec.weight_shape(), &layer.weight, &layer.bias)
            {
                if w.shape() != ws || b.shape() != [bs] {
                    return Err(bad(format!(
                        "parameter shapes {:?}/{:?} disagree with spec",
                        w.shape(),
                        b.shape()
                    )));
                }
            } else if layer.spec.weight_shape().is_some() {
                return Err(bad("missing parameters".into()));
            }
            out.push(cur.clone());
        }
        if cur != [self.meta.class_count] {
            return Err(Error::shape(
                "model",
                format!(
                    "network ends in {cur:?}, expected [{}] logits",
                    self.meta.class_count
                ),
            ));
        }
        Ok(out)
    }

    /// Graph indices of the convolution layers, in order.
    pub fn conv_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l.spec, LayerSpec::Conv { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn filter_counts(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter_map(|l| match l.spec {
                LayerSpec::Conv { filters, .. } => Some(filters),
                _ => None,
            })
            .collect()
    }

    pub fn total_filters(&self) -> usize {
        self.filter_counts().iter().sum()
    }

    pub fn param_name(layer: usize, bias: bool) -> String {
        format!("layers.{layer}.{}", if bias { "bias" } else { "weight" })
    }

    /// `(name, tensor)` for every parameter in layer order, weight before bias.
    pub fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            if let (Some(w), Some(b)) = (&l.weight, &l.bias) {
                out.push((Self::param_name(i, false), w));
                out.push((Self::param_name(i, true), b));
            }
        }
        out
    }

    /// Mutable parameters in the same order as [`ModelGraph::params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            if let (Some(w), Some(b)) = (l.weight.as_mut(), l.bias.as_mut()) {
                out.push(w);
                out.push(b);
            }
        }
        out
    }

    pub fn cast<U: Real>(&self) -> ModelGraph<U> {
        ModelGraph {
            meta: self.meta.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    spec: l.spec,
                    weight: l.weight.as_ref().map(Tensor::cast),
                    bias: l.bias.as_ref().map(Tensor::cast),
                })
                .collect(),
            norm: self.norm.clone(),
            history: self.history.clone(),
        }
    }

    fn normalize(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let [c, h, w] = self.meta.input_shape;
        if input.rank() != 4 || input.shape()[1..] != [c, h, w] {
            return Err(Error::shape(
                "model",
                format!("input {:?} does not match N×{c}×{h}×{w}", input.shape()),
            ));
        }
        let plane = h * w;
        let mut x = input.clone();
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            let ch = (i / plane) % c;
            *v = (*v - T::of(self.norm.mean[ch] as f64)) / T::of(self.norm.std[ch] as f64);
        }
        Ok(x)
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.run(input, None, None)
    }

    /// Forward pass with the activation maps of masked-out conv filters forced
    /// to zero.
    pub fn forward_masked(&self, input: &Tensor<T>, masks: &ChannelMasks) -> Result<Tensor<T>> {
        self.run(input, Some(masks), None)
    }

    /// Forward pass that also returns every conv layer's (masked) output.
    pub fn forward_capture(&self, input: &Tensor<T>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let mut captured = Vec::new();
        let logits = self.run(input, None, Some(&mut captured))?;
        Ok((logits, captured))
    }

    fn run(
        &self,
        input: &Tensor<T>,
        masks: Option<&ChannelMasks>,
        mut capture: Option<&mut Vec<Tensor<T>>>,
    ) -> Result<Tensor<T>> {
        let mut x = self.normalize(input)?;
        let mut conv_idx = 0;
        for layer in &self.layers {
            x = match layer.spec {
                LayerSpec::Conv { stride, pad, .. } => {
                    let mut y =
                        tensor::conv2d(&x, param(&layer.weight), param(&layer.bias), stride, pad)?;
                    if let Some(Some(keep)) = masks.and_then(|m| m.get(conv_idx)) {
                        zero_channels(&mut y, keep)?;
                    }
                    if let Some(c) = capture.as_deref_mut() {
                        c.push(y.clone());
                    }
                    conv_idx += 1;
                    y
                }
                LayerSpec::Relu => tensor::relu(&x),
                LayerSpec::MaxPool { size, stride } => tensor::maxpool2d(&x, size, stride)?.output,
                LayerSpec::Flatten => {
                    let n = x.dim(0);
                    let d = x.numel() / n.max(1);
                    x.reshape(vec![n, d])?
                }
                LayerSpec::Linear { .. } => {
                    tensor::linear(&x, param(&layer.weight), param(&layer.bias))?
                }
            };
        }
        Ok(x)
    }

    /// Records the forward pass on `tape` with every parameter as a
    /// gradient-tracking leaf.
    pub fn forward_tape(
        &self,
        tape: &mut Tape<T>,
        input: &Tensor<T>,
    ) -> Result<(Var, Vec<ParamVars>)> {
        let x = self.normalize(input)?;
        let mut x = tape.constant(x)?;
        let mut params = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            x = match layer.spec {
                LayerSpec::Conv { stride, pad, .. } => {
                    let w = tape.param(param(&layer.weight).clone())?;
                    let b = tape.param(param(&layer.bias).clone())?;
                    params.push(ParamVars {
                        layer: i,
                        weight: w,
                        bias: b,
                    });
                    tape.conv2d(x, w, b, stride, pad)?
                }
                LayerSpec::Relu => tape.relu(x)?,
                LayerSpec::MaxPool { size, stride } => tape.maxpool2d(x, size, stride)?,
                LayerSpec::Flatten => tape.flatten(x)?,
                LayerSpec::Linear { .. } => {
                    let w = tape.param(param(&layer.weight).clone())?;
                    let b = tape.param(param(&layer.bias).clone())?;
                    params.push(ParamVars {
                        layer: i,
                        weight: w,
                        bias: b,
                    });
                    tape.linear(x, w, b)?
                }
            };
        }
        Ok((x, params))
    }
}

fn param<T>(p: &Option<Tensor<T>>) -> &Tensor<T> {
    p.as_ref()
        .expect("parameterized layer carries weight and bias")
}

fn zero_channels<T: Real>(y: &mut Tensor<T>, keep: &[bool]) -> Result<()> {
    let (n, c) = (y.dim(0), y.dim(1));
    if keep.len() != c {
        return Err(Error::shape(
            "mask",
            format!("mask has {} entries for {c} channels", keep.len()),
        ));
    }
    let plane = y.numel() / (n * c).max(1);
    for s in 0..n {
        for (ch, &k) in keep.iter().enumerate() {
            if !k {
                let start = (s * c + ch) * plane;
                y.data_mut()[start..start + plane].fill(T::zero());
            }
        }
    }
    Ok(())
}
