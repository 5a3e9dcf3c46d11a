//! Kept-filter selection and physical filter removal.
//!
//! Removing filter `f` of conv layer `l` deletes row `f` of that layer's
//! weight and bias, the matching input-channel slice of the next conv, or,
//! when the next parameterized layer is the first linear layer after the
//! flatten, the `H·W` consecutive input rows that channel `f` occupies in
//! channel-major flatten order. Without normalization layers this is exactly
//! equivalent to zeroing the removed filters' activation maps.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{count_flops, count_params, LayerSpec, ModelGraph};
use crate::sensitivity::ScoreTable;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Remove the filters with the largest fused importance.
    #[default]
    PruneHighest,
    PruneLowest,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::PruneHighest => "prune_highest",
            Direction::PruneLowest => "prune_lowest",
        })
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prune_highest" => Ok(Direction::PruneHighest),
            "prune_lowest" => Ok(Direction::PruneLowest),
            other => Err(Error::InvalidArgument(format!(
                "unknown direction {other:?} (expected prune_highest or prune_lowest)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    /// Ordinal of the conv layer (0 = first conv).
    pub conv: usize,
    /// Requested pruning ratio in percent.
    pub ratio: f64,
    /// Surviving filter indices, ascending.
    pub kept: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrunePlan {
    pub layers: Vec<LayerPlan>,
    pub direction: Direction,
}

impl PrunePlan {
    /// Keeps every filter of every conv layer.
    pub fn identity<T: Real>(model: &ModelGraph<T>) -> Self {
        PrunePlan {
            layers: model
                .filter_counts()
                .into_iter()
                .enumerate()
                .map(|(conv, f)| LayerPlan {
                    conv,
                    ratio: 0.0,
                    kept: (0..f).collect(),
                })
                .collect(),
            direction: Direction::default(),
        }
    }

    /// Per-conv keep masks for [`ModelGraph::forward_masked`].
    pub fn masks<T: Real>(&self, model: &ModelGraph<T>) -> Vec<Option<Vec<bool>>> {
        let counts = model.filter_counts();
        let mut masks = vec![None; counts.len()];
        for lp in &self.layers {
            if let Some(&f) = counts.get(lp.conv) {
                let mut m = vec![false; f];
                for &k in &lp.kept {
                    if k < f {
                        m[k] = true;
                    }
                }
                masks[lp.conv] = Some(m);
            }
        }
        masks
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDelta {
    pub params_before: u64,
    pub params_after: u64,
    pub macs_before: u64,
    pub macs_after: u64,
    pub filters_before: Vec<usize>,
    pub filters_after: Vec<usize>,
}

/// `max(1, round(filters · (1 − ratio/100)))`, rounding half away from zero.
pub fn kept_count(filters: usize, ratio: f64) -> usize {
    let kept = (filters as f64 * (100.0 - ratio) / 100.0).round();
    (kept.max(1.0) as usize).min(filters.max(1))
}

/// Selects the surviving filters of one layer from fused importances.
/// Ties keep the lower index.
pub fn rank_filters(imps: &[f64], ratio: f64, direction: Direction) -> Result<Vec<usize>> {
    if imps.is_empty() {
        return Err(Error::Plan("layer has no filters".into()));
    }
    if !(0.0..100.0).contains(&ratio) {
        return Err(Error::Plan(format!("ratio {ratio} outside [0, 100)")));
    }
    let mut order: Vec<usize> = (0..imps.len()).collect();
    // Keep priority: the filters least likely to be removed come first.
    order.sort_by(|&a, &b| {
        let by_imp = match direction {
            Direction::PruneHighest => imps[a].total_cmp(&imps[b]),
            Direction::PruneLowest => imps[b].total_cmp(&imps[a]),
        };
        by_imp.then(a.cmp(&b))
    });
    let mut kept = order[..kept_count(imps.len(), ratio)].to_vec();
    kept.sort_unstable();
    Ok(kept)
}

/// Builds a plan from a score table and one ratio per conv layer.
pub fn plan_from_scores<T: Real>(
    model: &ModelGraph<T>,
    scores: &ScoreTable,
    ratios: &[f64],
    direction: Direction,
) -> Result<PrunePlan> {
    let counts = model.filter_counts();
    if ratios.len() != counts.len() {
        return Err(Error::Plan(format!(
            "{} ratios for {} conv layers",
            ratios.len(),
            counts.len()
        )));
    }
    let mut layers = Vec::with_capacity(counts.len());
    for (conv, (&filters, &ratio)) in counts.iter().zip(ratios).enumerate() {
        let imps = scores.layer_imps(conv);
        if imps.len() != filters {
            return Err(Error::Plan(format!(
                "score table has {} rows for conv {conv}, which has {filters} filters",
                imps.len()
            )));
        }
        layers.push(LayerPlan {
            conv,
            ratio,
            kept: rank_filters(&imps, ratio, direction)?,
        });
    }
    Ok(PrunePlan { layers, direction })
}

fn validate_plan<T: Real>(
    model: &ModelGraph<T>,
    plan: &PrunePlan,
) -> Result<Vec<Option<Vec<usize>>>> {
    let counts = model.filter_counts();
    let mut kept = vec![None; counts.len()];
    for lp in &plan.layers {
        let &f = counts.get(lp.conv).ok_or_else(|| {
            Error::Plan(format!(
                "plan names conv {} but model has {}",
                lp.conv,
                counts.len()
            ))
        })?;
        if lp.kept.is_empty() {
            return Err(Error::Plan(format!(
                "conv {} would keep zero filters",
                lp.conv
            )));
        }
        if lp.kept.windows(2).any(|w| w[0] >= w[1]) || lp.kept.iter().any(|&k| k >= f) {
            return Err(Error::Plan(format!(
                "conv {}: kept indices must be ascending, unique and < {f}",
                lp.conv
            )));
        }
        if kept[lp.conv].replace(lp.kept.clone()).is_some() {
            return Err(Error::Plan(format!(
                "conv {} appears twice in plan",
                lp.conv
            )));
        }
    }
    Ok(kept)
}

fn select_rows<T: Real>(t: &Tensor<T>, rows: &[usize]) -> Tensor<T> {
    let row: usize = t.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(rows.len() * row);
    for &r in rows {
        data.extend_from_slice(&t.data()[r * row..(r + 1) * row]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = rows.len();
    Tensor::new(shape, data).expect("row selection shape")
}

/// Keeps input-channel slices (axis 1) of an OIHW weight.
fn select_in_channels<T: Real>(t: &Tensor<T>, channels: &[usize]) -> Tensor<T> {
    let (o, i) = (t.dim(0), t.dim(1));
    let plane: usize = t.shape()[2..].iter().product();
    let mut data = Vec::with_capacity(o * channels.len() * plane);
    for oc in 0..o {
        for &c in channels {
            let start = (oc * i + c) * plane;
            data.extend_from_slice(&t.data()[start..start + plane]);
        }
    }
    Tensor::new(vec![o, channels.len(), t.dim(2), t.dim(3)], data).expect("channel selection shape")
}

/// Physically removes pruned filters and rewires the downstream consumer.
pub fn apply_prune<T: Real>(
    model: &ModelGraph<T>,
    plan: &PrunePlan,
) -> Result<(ModelGraph<T>, ModelDelta)> {
    let kept = validate_plan(model, plan)?;
    let shapes = model.infer_shapes()?;
    let mut out = model.clone();
    let mut conv_idx = 0;
    // Surviving channels of the most recent conv output, if it was pruned.
    let mut incoming: Option<Vec<usize>> = None;
    // Spatial size of each channel at the flatten boundary.
    let mut flat_plane: Option<usize> = None;
    let mut after_flatten_linear_seen = false;

    for (i, layer) in out.layers.iter_mut().enumerate() {
        match &mut layer.spec {
            LayerSpec::Conv {
                in_channels,
                filters,
                ..
            } => {
                let w = layer.weight.as_mut().expect("conv weight");
                if let Some(ch) = incoming.take() {
                    *w = select_in_channels(w, &ch);
                    *in_channels = ch.len();
                }
                if let Some(k) = &kept[conv_idx] {
                    if k.len() != *filters {
                        *w = select_rows(w, k);
                        let b = layer.bias.as_mut().expect("conv bias");
                        *b = select_rows(b, k);
                        *filters = k.len();
                        incoming = Some(k.clone());
                    }
                }
                conv_idx += 1;
            }
            LayerSpec::Flatten => {
                let prev = if i == 0 {
                    model.meta.input_shape.to_vec()
                } else {
                    shapes[i - 1].clone()
                };
                flat_plane = Some(prev.iter().skip(1).product());
            }
            LayerSpec::Linear { in_features, .. } => {
                if !after_flatten_linear_seen {
                    after_flatten_linear_seen = true;
                    if let (Some(ch), Some(plane)) = (incoming.take(), flat_plane) {
                        let rows: Vec<usize> = ch
                            .iter()
                            .flat_map(|&c| c * plane..(c + 1) * plane)
                            .collect();
                        let w = layer.weight.as_mut().expect("linear weight");
                        *w = select_rows(w, &rows);
                        *in_features = rows.len();
                    }
                }
            }
            LayerSpec::Relu | LayerSpec::MaxPool { .. } => {}
        }
    }
    if incoming.is_some() {
        return Err(Error::Plan(
            "pruned channels have no downstream consumer to rewire".into(),
        ));
    }
    out.infer_shapes()?;
    let delta = ModelDelta {
        params_before: count_params(model).total,
        params_after: count_params(&out).total,
        macs_before: count_flops(model)?.total_macs,
        macs_after: count_flops(&out)?.total_macs,
        filters_before: model.filter_counts(),
        filters_after: out.filter_counts(),
    };
    Ok((out, delta))
}

/// `max |logits(pruned) − logits(original with removed maps zeroed)|`.
pub fn mask_equivalence_check<T: Real>(
    model: &ModelGraph<T>,
    plan: &PrunePlan,
    probe: &Tensor<T>,
) -> Result<T> {
    let (pruned, _) = apply_prune(model, plan)?;
    let masked = model.forward_masked(probe, &plan.masks(model))?;
    pruned.forward(probe)?.max_abs_diff(&masked)
}
