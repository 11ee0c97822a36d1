//! Randomly initialized models for `pconv init`.

use std::str::FromStr;

use pconv_core::model::{ConvLayer, ConvWeights, Layer, ModelGraph, Shape3};
use pconv_core::tensor::{ConvSpec, DenseConvLayer};
use pconv_core::train::toy_cnn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    /// Two-conv CNN on 2x16x16 inputs, trainable on the synthetic data.
    Toy,
    /// The thirteen VGG-16 conv layers with ReLU and pooling, 3x224x224 input.
    Vgg16,
    /// VGG-16 with every channel count divided by 8 and a 32x32 input.
    Vgg16Small,
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Arch::Toy),
            "vgg16" => Ok(Arch::Vgg16),
            "vgg16-small" => Ok(Arch::Vgg16Small),
            _ => Err(Error::Parse(format!("unknown architecture {s:?}; expected toy, vgg16 or vgg16-small"))),
        }
    }
}

/// Output channels of the VGG-16 convs; 0 marks a 2x2 max pool.
const VGG16: [usize; 18] = [64, 64, 0, 128, 128, 0, 256, 256, 256, 0, 512, 512, 512, 0, 512, 512, 512, 0];

pub(crate) fn he_uniform_conv(rng: &mut ChaCha8Rng, f: usize, c: usize, k: usize) -> Result<DenseConvLayer> {
    let bound = (6.0 / (c * k * k) as f32).sqrt();
    let w = (0..f * c * k * k).map(|_| rng.gen_range(-bound..bound)).collect();
    let b = (0..f).map(|_| rng.gen_range(-0.05f32..0.05)).collect();
    Ok(DenseConvLayer::new(f, c, k, k, w, b)?)
}

fn vgg(seed: u64, divisor: usize, side: usize) -> Result<ModelGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let mut c = 3;
    for &f in &VGG16 {
        if f == 0 {
            layers.push(Layer::MaxPool { size: 2, stride: 2 });
            continue;
        }
        let f = f / divisor;
        let weights = ConvWeights::Dense(he_uniform_conv(&mut rng, f, c, 3)?);
        layers.push(Layer::Conv(ConvLayer { spec: ConvSpec::same3x3(), weights }));
        layers.push(Layer::Relu);
        c = f;
    }
    Ok(ModelGraph::new(Shape3::new(3, side, side), layers)?)
}

pub fn build_model(arch: Arch, seed: u64) -> Result<ModelGraph> {
    match arch {
        Arch::Toy => Ok(toy_cnn(seed)),
        Arch::Vgg16 => vgg(seed, 1, 224),
        Arch::Vgg16Small => vgg(seed, 8, 32),
    }
}
