//! Architectures used by the pipeline. Builders return zero-valued
//! parameters; call [`ModelGraph::initialized`] for random weights.

use super::{LayerSpec, ModelGraph, ModelMeta};
use crate::error::{Error, Result};
use crate::tensor::Real;

fn conv(in_channels: usize, filters: usize) -> LayerSpec {
    LayerSpec::Conv {
        in_channels,
        filters,
        kernel: 3,
        stride: 1,
        pad: 1,
    }
}

const POOL: LayerSpec = LayerSpec::MaxPool { size: 2, stride: 2 };

fn linear(in_features: usize, out_features: usize) -> LayerSpec {
    LayerSpec::Linear {
        in_features,
        out_features,
    }
}

fn meta(arch: &str, input_shape: [usize; 3]) -> ModelMeta {
    ModelMeta {
        arch: arch.into(),
        input_shape,
        class_count: 10,
    }
}

/// AlexNet adapted to 3×32×32 inputs: five 3×3 convs
/// (64, 192, 384, 256, 256 filters), pooling after convs 1, 2 and 5, and a
/// 4096→1024→512→10 classifier.
pub fn build_alexnet_cifar<T: Real>() -> Result<ModelGraph<T>> {
    let widths = [64, 192, 384, 256, 256];
    let mut specs = Vec::new();
    let mut c = 3;
    for (i, &f) in widths.iter().enumerate() {
        specs.push(conv(c, f));
        specs.push(LayerSpec::Relu);
        if matches!(i, 0 | 1 | 4) {
            specs.push(POOL);
        }
        c = f;
    }
    specs.extend([
        LayerSpec::Flatten,
        linear(256 * 4 * 4, 1024),
        LayerSpec::Relu,
        linear(1024, 512),
        LayerSpec::Relu,
        linear(512, 10),
    ]);
    ModelGraph::from_specs(meta("alexnet_cifar", [3, 32, 32]), specs)
}

/// VGG16 conv stack on 3×32×32 inputs with a 512→256→10 classifier.
pub fn build_vgg16_cifar<T: Real>() -> Result<ModelGraph<T>> {
    let blocks: [&[usize]; 5] = [
        &[64, 64],
        &[128, 128],
        &[256, 256, 256],
        &[512, 512, 512],
        &[512, 512, 512],
    ];
    let mut specs = Vec::new();
    let mut c = 3;
    for block in blocks {
        for &f in block {
            specs.push(conv(c, f));
            specs.push(LayerSpec::Relu);
            c = f;
        }
        specs.push(POOL);
    }
    specs.extend([
        LayerSpec::Flatten,
        linear(512, 256),
        LayerSpec::Relu,
        linear(256, 10),
    ]);
    ModelGraph::from_specs(meta("vgg16_cifar", [3, 32, 32]), specs)
}

/// Two-conv network for 1×28×28 inputs.
pub fn build_tiny_cnn<T: Real>() -> Result<ModelGraph<T>> {
    let specs = vec![
        conv(1, 8),
        LayerSpec::Relu,
        POOL,
        conv(8, 16),
        LayerSpec::Relu,
        POOL,
        LayerSpec::Flatten,
        linear(16 * 7 * 7, 10),
    ];
    ModelGraph::from_specs(meta("tiny_cnn", [1, 28, 28]), specs)
}

pub fn build_by_name(name: &str) -> Result<ModelGraph<f32>> {
    match name {
        "tiny_cnn" => build_tiny_cnn(),
        "alexnet_cifar" => build_alexnet_cifar(),
        "vgg16_cifar" => build_vgg16_cifar(),
        other => Err(Error::InvalidArgument(format!(
            "unknown model {other:?} (expected tiny_cnn, alexnet_cifar or vgg16_cifar)"
        ))),
    }
}
