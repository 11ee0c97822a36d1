//! Minimal SGD training of sequential conv nets on [`crate::data`].
//!
//! Softmax cross-entropy, momentum SGD with a cosine-decayed learning rate,
//! and two hooks used by ADMM: a quadratic pull of conv weights towards
//! targets, and fixed masks that keep pruned weights at zero.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, CHANNELS, CLASSES, SIDE};
use crate::model::{ConvLayer, ConvWeights, DenseLayer, Layer, ModelGraph, Shape3};
use crate::tensor::{ConvSpec, DenseConvLayer};
use crate::{err, Error, Result};

/// Two 3x3 conv layers and a linear classifier for 2x16x16 inputs.
pub fn toy_cnn(seed: u64) -> ModelGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |n: usize, fan_in: usize| -> Vec<f32> {
        let bound = libm::sqrtf(6.0 / fan_in as f32);
        (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
    };
    let conv = |f: usize, c: usize, w: Vec<f32>| {
        Layer::Conv(ConvLayer {
            spec: ConvSpec::same3x3(),
            weights: ConvWeights::Dense(DenseConvLayer::new(f, c, 3, 3, w, vec![0.0; f]).expect("toy conv")),
        })
    };
    let w1 = uniform(8 * CHANNELS * 9, CHANNELS * 9);
    let w2 = uniform(16 * 8 * 9, 8 * 9);
    let w3 = uniform(CLASSES * 256, 256);
    ModelGraph::new(
        Shape3::new(CHANNELS, SIDE, SIDE),
        vec![
            conv(8, CHANNELS, w1),
            Layer::Relu,
            Layer::MaxPool { size: 2, stride: 2 },
            conv(16, 8, w2),
            Layer::Relu,
            Layer::MaxPool { size: 2, stride: 2 },
            Layer::Dense(DenseLayer { inputs: 256, outputs: CLASSES, weights: w3, bias: vec![0.0; CLASSES] }),
        ],
    )
    .expect("toy model shapes compose")
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub seed: u64,
}

#[derive(Debug, Clone)]
enum NetLayer {
    Conv { spec: ConvSpec, filters: usize, channels: usize, w: Vec<f32>, b: Vec<f32> },
    Relu,
    MaxPool { size: usize, stride: usize },
    Dense { inputs: usize, outputs: usize, w: Vec<f32>, b: Vec<f32> },
}

/// Trainable copy of a model with every conv held densely.
#[derive(Debug, Clone)]
pub struct Network {
    shapes: Vec<Shape3>,
    layers: Vec<NetLayer>,
}

/// Quadratic pull `rho/2 * |W - target|^2` and fixed masks, per layer index.
#[derive(Debug, Clone, Default)]
pub struct Constraints {
    pub rho: f32,
    pub targets: Vec<Option<Vec<f32>>>,
    pub masks: Vec<Option<Vec<f32>>>,
}

impl Constraints {
    fn target(&self, layer: usize) -> Option<&[f32]> {
        self.targets.get(layer).and_then(|t| t.as_deref())
    }

    fn mask(&self, layer: usize) -> Option<&[f32]> {
        self.masks.get(layer).and_then(|m| m.as_deref())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

/// `(weight, bias)` gradients per layer; empty for parameter-free layers.
type Grads = Vec<(Vec<f32>, Vec<f32>)>;

struct Cache {
    /// Input of every layer, then the logits.
    acts: Vec<Vec<f32>>,
    /// Argmax source index of every pooled output.
    pool_idx: Vec<Vec<usize>>,
}

impl Network {
    pub fn from_model(model: &ModelGraph) -> Result<Self> {
        let shapes = model.shapes()?;
        let layers = model
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => {
                    let d = c.weights.to_dense();
                    NetLayer::Conv {
                        spec: c.spec,
                        filters: d.filters(),
                        channels: d.channels(),
                        w: d.weights().to_vec(),
                        b: d.bias().to_vec(),
                    }
                }
                Layer::Relu => NetLayer::Relu,
                Layer::MaxPool { size, stride } => NetLayer::MaxPool { size: *size, stride: *stride },
                Layer::Dense(d) => {
                    NetLayer::Dense { inputs: d.inputs, outputs: d.outputs, w: d.weights.clone(), b: d.bias.clone() }
                }
            })
            .collect();
        Ok(Network { shapes, layers })
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Dense weights of conv layer `i`, if it is one.
    pub fn conv_layer(&self, i: usize) -> Option<DenseConvLayer> {
        match &self.layers[i] {
            NetLayer::Conv { spec, filters, channels, w, b } => {
                DenseConvLayer::new(*filters, *channels, spec.kernel_h, spec.kernel_w, w.clone(), b.clone()).ok()
            }
            _ => None,
        }
    }

    pub fn conv_weights(&self, i: usize) -> Option<&[f32]> {
        match &self.layers[i] {
            NetLayer::Conv { w, .. } => Some(w),
            _ => None,
        }
    }

    /// Graph with every conv dense.
    pub fn to_model(&self) -> Result<ModelGraph> {
        let layers = self
            .layers
            .iter()
            .map(|l| -> Result<Layer> {
                Ok(match l {
                    NetLayer::Conv { spec, filters, channels, w, b } => Layer::Conv(ConvLayer {
                        spec: *spec,
                        weights: ConvWeights::Dense(DenseConvLayer::new(
                            *filters,
                            *channels,
                            spec.kernel_h,
                            spec.kernel_w,
                            w.clone(),
                            b.clone(),
                        )?),
                    }),
                    NetLayer::Relu => Layer::Relu,
                    NetLayer::MaxPool { size, stride } => Layer::MaxPool { size: *size, stride: *stride },
                    NetLayer::Dense { inputs, outputs, w, b } => Layer::Dense(DenseLayer {
                        inputs: *inputs,
                        outputs: *outputs,
                        weights: w.clone(),
                        bias: b.clone(),
                    }),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        ModelGraph::new(self.shapes[0], layers)
    }

    fn forward(&self, x: Vec<f32>, n: usize) -> Cache {
        let mut acts = vec![x];
        let mut pool_idx = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let (s, o) = (self.shapes[i], self.shapes[i + 1]);
            let x = acts.last().unwrap();
            let y = match layer {
                NetLayer::Conv { spec, filters, w, b, .. } => conv_forward(x, n, s, o, spec, *filters, w, b),
                NetLayer::Relu => x.iter().map(|&v| v.max(0.0)).collect(),
                NetLayer::MaxPool { size, stride } => {
                    let (y, idx) = pool_forward(x, n, s, o, *size, *stride);
                    pool_idx.push(idx);
                    y
                }
                NetLayer::Dense { inputs, outputs, w, b } => {
                    let mut y = Vec::with_capacity(n * outputs);
                    for xi in x.chunks_exact(*inputs) {
                        for o in 0..*outputs {
                            let row = &w[o * inputs..(o + 1) * inputs];
                            y.push(b[o] + row.iter().zip(xi).map(|(a, b)| a * b).sum::<f32>());
                        }
                    }
                    y
                }
            };
            acts.push(y);
        }
        Cache { acts, pool_idx }
    }

    /// Mean loss and parameter gradients, laid out like the parameters.
    fn gradients(&self, cache: &Cache, labels: &[usize]) -> (f64, Grads) {
        let n = labels.len();
        let logits = cache.acts.last().unwrap();
        let classes = logits.len() / n;
        let mut g = vec![0.0f32; logits.len()];
        let mut loss = 0.0f64;
        for (i, (&label, row)) in labels.iter().zip(logits.chunks_exact(classes)).enumerate() {
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let z: f32 = row.iter().map(|&v| libm::expf(v - m)).sum();
            loss += f64::from(libm::logf(z) + m - row[label]);
            for (k, &v) in row.iter().enumerate() {
                let p = libm::expf(v - m) / z;
                g[i * classes + k] = (p - if k == label { 1.0 } else { 0.0 }) / n as f32;
            }
        }
        let mut grads: Grads = vec![(Vec::new(), Vec::new()); self.layers.len()];
        let mut pool_k = cache.pool_idx.len();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let (s, o) = (self.shapes[i], self.shapes[i + 1]);
            let x = &cache.acts[i];
            g = match layer {
                NetLayer::Conv { spec, filters, channels, w, .. } => {
                    let (gx, gw, gb) = conv_backward(x, &g, n, s, o, spec, *filters, *channels, w);
                    grads[i] = (gw, gb);
                    gx
                }
                NetLayer::Relu => {
                    g.iter().zip(&cache.acts[i + 1]).map(|(&d, &y)| if y > 0.0 { d } else { 0.0 }).collect()
                }
                NetLayer::MaxPool { .. } => {
                    pool_k -= 1;
                    let mut gx = vec![0.0f32; x.len()];
                    for (&src, &d) in cache.pool_idx[pool_k].iter().zip(&g) {
                        gx[src] += d;
                    }
                    gx
                }
                NetLayer::Dense { inputs, outputs, w, .. } => {
                    let mut gw = vec![0.0f32; w.len()];
                    let mut gb = vec![0.0f32; *outputs];
                    let mut gx = vec![0.0f32; x.len()];
                    for (xi, (gi, gxi)) in
                        x.chunks_exact(*inputs).zip(g.chunks_exact(*outputs).zip(gx.chunks_exact_mut(*inputs)))
                    {
                        for (o, &d) in gi.iter().enumerate() {
                            gb[o] += d;
                            let row = &w[o * inputs..(o + 1) * inputs];
                            for ((gwv, gxv), (&xv, &wv)) in
                                gw[o * inputs..(o + 1) * inputs].iter_mut().zip(gxi.iter_mut()).zip(xi.iter().zip(row))
                            {
                                *gwv += d * xv;
                                *gxv += d * wv;
                            }
                        }
                    }
                    grads[i] = (gw, gb);
                    gx
                }
            };
        }
        (loss / n as f64, grads)
    }

    pub fn evaluate(&self, data: &Dataset) -> Result<Evaluation> {
        if data.is_empty() {
            return Err(err!(Data, "cannot evaluate on an empty dataset"));
        }
        let (mut loss, mut correct) = (0.0f64, 0usize);
        let idx: Vec<usize> = (0..data.len()).collect();
        for chunk in idx.chunks(256) {
            let (x, labels) = data.batch(chunk)?;
            let cache = self.forward(x.into_data(), chunk.len());
            let logits = cache.acts.last().unwrap();
            for (row, &label) in logits.chunks_exact(logits.len() / chunk.len()).zip(&labels) {
                let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let z: f32 = row.iter().map(|&v| libm::expf(v - m)).sum();
                loss += f64::from(libm::logf(z) + m - row[label]);
                let best = row.iter().enumerate().fold(0, |b, (k, &v)| if v > row[b] { k } else { b });
                correct += (best == label) as usize;
            }
        }
        Ok(Evaluation { loss: loss / data.len() as f64, accuracy: correct as f64 / data.len() as f64 })
    }

    /// Momentum SGD over `data`; returns the mean training loss of each epoch.
    pub fn train(&mut self, data: &Dataset, config: &TrainConfig, constraints: &Constraints) -> Result<Vec<f64>> {
        if config.batch_size == 0 || data.is_empty() {
            return Err(err!(Config, "training needs a positive batch size and data"));
        }
        self.apply_masks(constraints);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut velocity: Vec<(Vec<f32>, Vec<f32>)> = self
            .layers
            .iter()
            .map(|l| match l {
                NetLayer::Conv { w, b, .. } | NetLayer::Dense { w, b, .. } => (vec![0.0; w.len()], vec![0.0; b.len()]),
                _ => (Vec::new(), Vec::new()),
            })
            .collect();
        let batches = data.len().div_ceil(config.batch_size);
        let total = (batches * config.epochs).max(1) as f32;
        let mut step = 0usize;
        let mut log = Vec::with_capacity(config.epochs);
        let mut order: Vec<usize> = (0..data.len()).collect();
        for epoch in 0..config.epochs {
            order.shuffle(&mut rng);
            let mut sum = 0.0f64;
            for chunk in order.chunks(config.batch_size) {
                let lr = config.learning_rate * 0.5 * (1.0 + libm::cosf(core::f32::consts::PI * step as f32 / total));
                step += 1;
                let (x, labels) = data.batch(chunk)?;
                let cache = self.forward(x.into_data(), chunk.len());
                let (loss, grads) = self.gradients(&cache, &labels);
                if !loss.is_finite() {
                    return Err(Error::Diverged(alloc::format!("training loss became {loss} in epoch {epoch}")));
                }
                sum += loss * chunk.len() as f64;
                for (i, ((layer, (gw, gb)), (vw, vb))) in
                    self.layers.iter_mut().zip(grads).zip(velocity.iter_mut()).enumerate()
                {
                    let (w, b) = match layer {
                        NetLayer::Conv { w, b, .. } | NetLayer::Dense { w, b, .. } => (w, b),
                        _ => continue,
                    };
                    let target = constraints.target(i);
                    let mask = constraints.mask(i);
                    for (j, (wv, g)) in w.iter_mut().zip(gw).enumerate() {
                        let mut g = g;
                        if let Some(t) = target {
                            g += constraints.rho * (*wv - t[j]);
                        }
                        if let Some(m) = mask {
                            g *= m[j];
                        }
                        vw[j] = config.momentum * vw[j] + g;
                        *wv -= lr * vw[j];
                        if let Some(m) = mask {
                            *wv *= m[j];
                        }
                    }
                    for ((bv, g), v) in b.iter_mut().zip(gb).zip(vb.iter_mut()) {
                        *v = config.momentum * *v + g;
                        *bv -= lr * *v;
                    }
                }
            }
            log.push(sum / data.len() as f64);
        }
        Ok(log)
    }

    fn apply_masks(&mut self, constraints: &Constraints) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            if let (NetLayer::Conv { w, .. }, Some(m)) = (layer, constraints.mask(i)) {
                for (wv, mv) in w.iter_mut().zip(m) {
                    *wv *= mv;
                }
            }
        }
    }

    pub(crate) fn set_conv_weights(&mut self, i: usize, weights: &[f32]) {
        if let NetLayer::Conv { w, .. } = &mut self.layers[i] {
            w.copy_from_slice(weights);
        }
    }
}

/// Valid `(output x, input x)` pairs of one kernel column.
fn valid_range(out: usize, input: usize, k: usize, stride: usize, pad: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..out).filter_map(move |o| {
        let i = (o * stride + k).checked_sub(pad)?;
        (i < input).then_some((o, i))
    })
}

#[allow(clippy::too_many_arguments)]
fn conv_forward(
    x: &[f32],
    n: usize,
    s: Shape3,
    o: Shape3,
    spec: &ConvSpec,
    filters: usize,
    w: &[f32],
    b: &[f32],
) -> Vec<f32> {
    let (kh, kw) = (spec.kernel_h, spec.kernel_w);
    let mut y = vec![0.0f32; n * o.len()];
    for ni in 0..n {
        let xin = &x[ni * s.len()..(ni + 1) * s.len()];
        for f in 0..filters {
            let yp = &mut y[(ni * filters + f) * o.h * o.w..][..o.h * o.w];
            yp.fill(b[f]);
            for c in 0..s.c {
                let xp = &xin[c * s.h * s.w..(c + 1) * s.h * s.w];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = w[((f * s.c + c) * kh + ky) * kw + kx];
                        for (oy, iy) in valid_range(o.h, s.h, ky, spec.stride, spec.padding) {
                            for (ox, ix) in valid_range(o.w, s.w, kx, spec.stride, spec.padding) {
                                yp[oy * o.w + ox] += wv * xp[iy * s.w + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &[f32],
    gy: &[f32],
    n: usize,
    s: Shape3,
    o: Shape3,
    spec: &ConvSpec,
    filters: usize,
    channels: usize,
    w: &[f32],
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let (kh, kw) = (spec.kernel_h, spec.kernel_w);
    let mut gx = vec![0.0f32; x.len()];
    let mut gw = vec![0.0f32; w.len()];
    let mut gb = vec![0.0f32; filters];
    for ni in 0..n {
        for f in 0..filters {
            let gp = &gy[(ni * filters + f) * o.h * o.w..][..o.h * o.w];
            gb[f] += gp.iter().sum::<f32>();
            for c in 0..channels {
                let base = (ni * channels + c) * s.h * s.w;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wi = ((f * channels + c) * kh + ky) * kw + kx;
                        let wv = w[wi];
                        let mut acc = 0.0f32;
                        for (oy, iy) in valid_range(o.h, s.h, ky, spec.stride, spec.padding) {
                            for (ox, ix) in valid_range(o.w, s.w, kx, spec.stride, spec.padding) {
                                let d = gp[oy * o.w + ox];
                                acc += d * x[base + iy * s.w + ix];
                                gx[base + iy * s.w + ix] += d * wv;
                            }
                        }
                        gw[wi] += acc;
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

fn pool_forward(x: &[f32], n: usize, s: Shape3, o: Shape3, size: usize, stride: usize) -> (Vec<f32>, Vec<usize>) {
    let mut y = Vec::with_capacity(n * o.len());
    let mut idx = Vec::with_capacity(n * o.len());
    for p in 0..n * s.c {
        let base = p * s.h * s.w;
        for oy in 0..o.h {
            for ox in 0..o.w {
                let mut best = base + oy * stride * s.w + ox * stride;
                for dy in 0..size {
                    for dx in 0..size {
                        let i = base + (oy * stride + dy) * s.w + ox * stride + dx;
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                }
                y.push(x[best]);
                idx.push(best);
            }
        }
    }
    (y, idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_split;
    use crate::model::forward_reference;
    use crate::util::max_rel_diff;

    #[test]
    fn forward_matches_reference_pipeline() {
        let model = toy_cnn(1);
        let net = Network::from_model(&model).unwrap();
        let data = crate::data::synthetic_dataset(4, 2);
        let (x, _) = data.batch(&[0, 1, 2, 3]).unwrap();
        let cache = net.forward(x.data().to_vec(), 4);
        let reference = forward_reference(&model, &x).unwrap();
        assert!(max_rel_diff(cache.acts.last().unwrap(), reference.data()) < 1e-4);
        assert_eq!(net.to_model().unwrap(), model);
    }

    /// Central differences against the analytic gradient of a few weights.
    #[test]
    fn gradients_match_finite_differences() {
        let model = toy_cnn(3);
        let net = Network::from_model(&model).unwrap();
        let data = crate::data::synthetic_dataset(6, 4);
        let idx: Vec<usize> = (0..6).collect();
        let (x, labels) = data.batch(&idx).unwrap();
        let cache = net.forward(x.data().to_vec(), 6);
        let (_, grads) = net.gradients(&cache, &labels);
        let loss_at = |net: &Network| {
            let c = net.forward(x.data().to_vec(), 6);
            net.gradients(&c, &labels).0
        };
        for (layer, j) in [(0usize, 5usize), (0, 31), (3, 100), (3, 777), (6, 40)] {
            let h = 1e-2f32;
            let mut plus = net.clone();
            let mut minus = net.clone();
            for (n, d) in [(&mut plus, h), (&mut minus, -h)] {
                match &mut n.layers[layer] {
                    NetLayer::Conv { w, .. } | NetLayer::Dense { w, .. } => w[j] += d,
                    _ => unreachable!(),
                }
            }
            let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * f64::from(h));
            let analytic = f64::from(grads[layer].0[j]);
            assert!((numeric - analytic).abs() < 2e-3 + 0.05 * analytic.abs(), "{layer}/{j}: {numeric} vs {analytic}");
        }
    }

    #[test]
    fn training_learns_the_toy_task() {
        let split = synthetic_split(600, 200, 5);
        let mut net = Network::from_model(&toy_cnn(5)).unwrap();
        let before = net.evaluate(&split.validation).unwrap();
        let cfg = TrainConfig { epochs: 4, batch_size: 32, learning_rate: 0.05, momentum: 0.9, seed: 1 };
        let log = net.train(&split.train, &cfg, &Constraints::default()).unwrap();
        let after = net.evaluate(&split.validation).unwrap();
        assert!(log.last().unwrap() < &log[0]);
        assert!(after.accuracy > before.accuracy + 0.3, "{before:?} -> {after:?}");
    }

    #[test]
    fn masks_keep_weights_at_zero() {
        let split = synthetic_split(64, 10, 6);
        let mut net = Network::from_model(&toy_cnn(6)).unwrap();
        let mut masks = vec![None; net.layer_count()];
        let m: Vec<f32> = (0..8 * 2 * 9).map(|i| (i % 3 == 0) as u8 as f32).collect();
        masks[0] = Some(m.clone());
        let c = Constraints { rho: 0.0, targets: Vec::new(), masks };
        let cfg = TrainConfig { epochs: 1, batch_size: 16, learning_rate: 0.05, momentum: 0.9, seed: 2 };
        net.train(&split.train, &cfg, &c).unwrap();
        for (w, m) in net.conv_weights(0).unwrap().iter().zip(&m) {
            if *m == 0.0 {
                assert_eq!(*w, 0.0);
            }
        }
    }
}
