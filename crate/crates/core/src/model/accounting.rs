use serde::Serialize;

use super::{LayerSpec, ModelGraph};
use crate::error::Result;
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerCost {
    pub layer: usize,
    pub kind: &'static str,
    pub count: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub per_layer: Vec<LayerCost>,
    pub total: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FlopCount {
    /// Multiply-accumulates per layer for one input sample.
    pub per_layer: Vec<LayerCost>,
    pub total_macs: u64,
    /// `2 · total_macs`.
    pub total_flops: u64,
}

/// Conv: `O·(k²·I + 1)`; linear: `D·M + M`.
pub fn count_params<T: Real>(model: &ModelGraph<T>) -> ParamCount {
    let per_layer: Vec<LayerCost> = model
        .layers
        .iter()
        .enumerate()
        .filter_map(|(i, l)| {
            let count = match l.spec {
                LayerSpec::Conv {
                    in_channels,
                    filters,
                    kernel,
                    ..
                } => filters * (kernel * kernel * in_channels + 1),
                LayerSpec::Linear {
                    in_features,
                    out_features,
                } => in_features * out_features + out_features,
                _ => return None,
            };
            Some(LayerCost {
                layer: i,
                kind: l.spec.kind(),
                count: count as u64,
            })
        })
        .collect();
    let total = per_layer.iter().map(|c| c.count).sum();
    ParamCount { per_layer, total }
}

/// Conv MACs `k²·I·O·H_out·W_out`, linear MACs `D·M`; activations and
/// pooling cost nothing.
pub fn count_flops<T: Real>(model: &ModelGraph<T>) -> Result<FlopCount> {
    let shapes = model.infer_shapes()?;
    let per_layer: Vec<LayerCost> = model
        .layers
        .iter()
        .enumerate()
        .filter_map(|(i, l)| {
            let macs = match l.spec {
                LayerSpec::Conv {
                    in_channels,
                    filters,
                    kernel,
                    ..
                } => kernel * kernel * in_channels * filters * shapes[i][1] * shapes[i][2],
                LayerSpec::Linear {
                    in_features,
                    out_features,
                } => in_features * out_features,
                _ => return None,
            };
            Some(LayerCost {
                layer: i,
                kind: l.spec.kind(),
                count: macs as u64,
            })
        })
        .collect();
    let total_macs = per_layer.iter().map(|c| c.count).sum();
    Ok(FlopCount {
        per_layer,
        total_macs,
        total_flops: 2 * total_macs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_alexnet_cifar, build_tiny_cnn, ModelGraph, ModelMeta};

    #[test]
    fn tiny_cnn_closed_form() {
        let m = build_tiny_cnn::<f32>().unwrap();
        let c = count_params(&m);
        assert_eq!(
            c.per_layer.iter().map(|l| l.count).collect::<Vec<_>>(),
            vec![80, 1168, 7850]
        );
        assert_eq!(c.total, 9098);
        let f = count_flops(&m).unwrap();
        assert_eq!(
            f.total_macs,
            9 * 8 * 28 * 28 + 9 * 8 * 16 * 14 * 14 + 784 * 10
        );
        assert_eq!(f.total_flops, 2 * f.total_macs);
    }

    #[test]
    fn alexnet_layer_macs() {
        let f = count_flops(&build_alexnet_cifar::<f32>().unwrap()).unwrap();
        assert_eq!(f.per_layer[0].count, 9 * 3 * 64 * 32 * 32);
        let fc1 = f.per_layer.iter().find(|l| l.kind == "linear").unwrap();
        assert_eq!(fc1.count, 4_194_304);
    }

    fn single_conv(filters: usize) -> ModelGraph<f32> {
        let meta = ModelMeta {
            arch: "c".into(),
            input_shape: [3, 32, 32],
            class_count: filters * 32 * 32,
        };
        ModelGraph::from_specs(
            meta,
            vec![
                LayerSpec::Conv {
                    in_channels: 3,
                    filters,
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                },
                LayerSpec::Flatten,
            ],
        )
        .unwrap()
    }

    #[test]
    fn conv_macs_closed_form_and_linearity() {
        let a = count_flops(&single_conv(8)).unwrap();
        assert_eq!(a.total_macs, 221_184);
        let b = count_flops(&single_conv(16)).unwrap();
        assert_eq!(b.total_macs, 2 * a.total_macs);
    }

    #[test]
    fn empty_model_has_no_params() {
        let meta = ModelMeta {
            arch: "empty".into(),
            input_shape: [1, 1, 1],
            class_count: 1,
        };
        let m = ModelGraph::<f32>::from_specs(meta, vec![LayerSpec::Flatten]).unwrap();
        assert_eq!(count_params(&m).total, 0);
    }
}
