//! Model graph, pattern-pruned layers and layerwise analysis.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::scp::PatternSet;
use crate::tensor::{self, check_permutation, conv2d_reference, ConvSpec, DenseConvLayer, MacCount, Tensor4D};
use crate::util::Fnv64;
use crate::{err, Result};

/// Pattern id marking a removed kernel.
pub const PRUNED: u8 = 255;

/// Per `(filter, channel)` pattern id, or [`PRUNED`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatternAssignment {
    pub filters: usize,
    pub channels: usize,
    pub ids: Vec<u8>,
}

impl PatternAssignment {
    pub fn get(&self, f: usize, c: usize) -> u8 {
        self.ids[f * self.channels + c]
    }

    pub fn retained_in_filter(&self, f: usize) -> usize {
        self.ids[f * self.channels..(f + 1) * self.channels].iter().filter(|&&id| id != PRUNED).count()
    }

    pub fn retained(&self) -> usize {
        self.ids.iter().filter(|&&id| id != PRUNED).count()
    }
}

/// A 3x3 convolution whose kernels each follow one pattern of a set, or are removed.
///
/// `weights` holds `nonzeros` values per retained kernel in filter-major,
/// channel-minor order, each kernel's values in increasing mask position.
#[derive(Debug, Clone, PartialEq)]
pub struct PrunedConvLayer {
    filters: usize,
    channels: usize,
    patterns: PatternSet,
    pattern_ids: Vec<u8>,
    weights: Vec<f32>,
    bias: Vec<f32>,
    balanced: bool,
    // Start of each kernel in `weights`; usize::MAX for pruned kernels.
    kernel_start: Vec<usize>,
    fingerprint: u64,
}

impl PrunedConvLayer {
    /// Checks structure only (lengths, id range). Value and balance checks
    /// are reported by [`PrunedConvLayer::violations`].
    pub fn new(
        filters: usize,
        channels: usize,
        patterns: PatternSet,
        pattern_ids: Vec<u8>,
        weights: Vec<f32>,
        bias: Vec<f32>,
        balanced: bool,
    ) -> Result<Self> {
        if filters == 0 || channels == 0 {
            return Err(err!(Shape, "pruned layer dims must be positive"));
        }
        if pattern_ids.len() != filters * channels {
            return Err(err!(Shape, "expected {} pattern ids, got {}", filters * channels, pattern_ids.len()));
        }
        if bias.len() != filters {
            return Err(err!(Shape, "expected {filters} biases, got {}", bias.len()));
        }
        let mut kernel_start = Vec::with_capacity(pattern_ids.len());
        let mut next = 0usize;
        for (i, &id) in pattern_ids.iter().enumerate() {
            if id == PRUNED {
                kernel_start.push(usize::MAX);
            } else if (id as usize) < patterns.len() {
                kernel_start.push(next);
                next += patterns.nonzeros();
            } else {
                return Err(err!(
                    Validation,
                    "filter {} channel {}: pattern id {id} out of range for {} patterns",
                    i / channels,
                    i % channels,
                    patterns.len()
                ));
            }
        }
        if weights.len() != next {
            return Err(err!(Shape, "expected {next} compact weights, got {}", weights.len()));
        }
        let fingerprint = layer_fingerprint(filters, channels, &patterns, &pattern_ids, &weights, &bias, balanced);
        Ok(PrunedConvLayer {
            filters,
            channels,
            patterns,
            pattern_ids,
            weights,
            bias,
            balanced,
            kernel_start,
            fingerprint,
        })
    }

    /// Gathers the masked positions of `dense` according to `assignment`.
    /// Values outside the mask are dropped.
    pub fn from_dense(
        dense: &DenseConvLayer,
        patterns: &PatternSet,
        assignment: &PatternAssignment,
        balanced: bool,
    ) -> Result<Self> {
        if dense.kernel_dims() != (3, 3) {
            let (kh, kw) = dense.kernel_dims();
            return Err(crate::Error::UnsupportedShape { kh, kw });
        }
        if (assignment.filters, assignment.channels) != (dense.filters(), dense.channels()) {
            return Err(err!(Shape, "assignment shape does not match layer"));
        }
        let mut weights = Vec::with_capacity(assignment.retained() * patterns.nonzeros());
        for f in 0..dense.filters() {
            for c in 0..dense.channels() {
                let id = assignment.get(f, c);
                if id == PRUNED {
                    continue;
                }
                let mask = patterns.get(id).ok_or_else(|| err!(Validation, "pattern id {id} out of range"))?;
                let kernel = dense.kernel(f, c);
                weights.extend(mask.positions().map(|p| kernel[p]));
            }
        }
        PrunedConvLayer::new(
            dense.filters(),
            dense.channels(),
            patterns.clone(),
            assignment.ids.clone(),
            weights,
            dense.bias().to_vec(),
            balanced,
        )
    }

    pub fn filters(&self) -> usize {
        self.filters
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn patterns(&self) -> &PatternSet {
        &self.patterns
    }

    pub fn nonzeros(&self) -> usize {
        self.patterns.nonzeros()
    }

    pub fn pattern_ids(&self) -> &[u8] {
        &self.pattern_ids
    }

    pub fn pattern_id(&self, f: usize, c: usize) -> u8 {
        self.pattern_ids[f * self.channels + c]
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    pub fn balanced(&self) -> bool {
        self.balanced
    }

    /// Offset of kernel `(f, c)` in the compact weights, `None` if pruned.
    pub fn weight_offset(&self, f: usize, c: usize) -> Option<usize> {
        let s = self.kernel_start[f * self.channels + c];
        (s != usize::MAX).then_some(s)
    }

    pub fn kernel_weights(&self, f: usize, c: usize) -> Option<&[f32]> {
        self.weight_offset(f, c).map(|s| &self.weights[s..s + self.nonzeros()])
    }

    pub fn retained_kernels(&self) -> usize {
        self.pattern_ids.iter().filter(|&&id| id != PRUNED).count()
    }

    pub fn retained_in_filter(&self, f: usize) -> usize {
        self.pattern_ids[f * self.channels..(f + 1) * self.channels].iter().filter(|&&id| id != PRUNED).count()
    }

    pub fn assignment(&self) -> PatternAssignment {
        PatternAssignment { filters: self.filters, channels: self.channels, ids: self.pattern_ids.clone() }
    }

    /// Scatters compact weights back into dense 3x3 kernels; removed kernels are zero.
    pub fn to_dense(&self) -> DenseConvLayer {
        let mut weights = vec![0.0f32; self.filters * self.channels * 9];
        for f in 0..self.filters {
            for c in 0..self.channels {
                let Some(vals) = self.kernel_weights(f, c) else { continue };
                let mask = &self.patterns.masks()[self.pattern_id(f, c) as usize];
                let dst = &mut weights[(f * self.channels + c) * 9..][..9];
                for (p, &v) in mask.positions().zip(vals) {
                    dst[p] = v;
                }
            }
        }
        DenseConvLayer::new(self.filters, self.channels, 3, 3, weights, self.bias.clone())
            .unwrap_or_else(|_| panic!("to_dense on a layer with non-finite weights"))
    }

    /// Drops the kernels that `assignment` marks [`PRUNED`]. Every kept kernel
    /// must keep its current pattern.
    pub fn with_assignment(&self, assignment: &PatternAssignment) -> Result<Self> {
        if (assignment.filters, assignment.channels) != (self.filters, self.channels) {
            return Err(err!(Shape, "assignment shape does not match layer"));
        }
        let mut weights = Vec::with_capacity(assignment.retained() * self.nonzeros());
        for f in 0..self.filters {
            for c in 0..self.channels {
                let id = assignment.get(f, c);
                if id == PRUNED {
                    continue;
                }
                if id != self.pattern_id(f, c) {
                    return Err(err!(Validation, "filter {f} channel {c}: assignment changes pattern"));
                }
                weights.extend_from_slice(self.kernel_weights(f, c).expect("retained"));
            }
        }
        PrunedConvLayer::new(
            self.filters,
            self.channels,
            self.patterns.clone(),
            assignment.ids.clone(),
            weights,
            self.bias.clone(),
            self.balanced,
        )
    }

    /// Moves filter `f` to position `perm[f]`.
    pub fn permute_filters(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.filters)?;
        let mut order = vec![0usize; self.filters];
        for (old, &new) in perm.iter().enumerate() {
            order[new] = old;
        }
        let mut ids = Vec::with_capacity(self.pattern_ids.len());
        let mut weights = Vec::with_capacity(self.weights.len());
        let mut bias = Vec::with_capacity(self.filters);
        for &f in &order {
            ids.extend_from_slice(&self.pattern_ids[f * self.channels..(f + 1) * self.channels]);
            for c in 0..self.channels {
                if let Some(w) = self.kernel_weights(f, c) {
                    weights.extend_from_slice(w);
                }
            }
            bias.push(self.bias[f]);
        }
        PrunedConvLayer::new(self.filters, self.channels, self.patterns.clone(), ids, weights, bias, self.balanced)
    }

    /// Moves input channel `c` to position `perm[c]`.
    pub fn permute_channels(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.channels)?;
        let mut order = vec![0usize; self.channels];
        for (old, &new) in perm.iter().enumerate() {
            order[new] = old;
        }
        let mut ids = Vec::with_capacity(self.pattern_ids.len());
        let mut weights = Vec::with_capacity(self.weights.len());
        for f in 0..self.filters {
            for &c in &order {
                ids.push(self.pattern_id(f, c));
                if let Some(w) = self.kernel_weights(f, c) {
                    weights.extend_from_slice(w);
                }
            }
        }
        PrunedConvLayer::new(
            self.filters,
            self.channels,
            self.patterns.clone(),
            ids,
            weights,
            self.bias.clone(),
            self.balanced,
        )
    }

    /// Hash of everything that affects execution, computed at construction.
    /// Plans record it so they cannot be run against a different layer.
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// Value-level problems: non-finite parameters and unequal per-filter
    /// kernel counts under the balanced flag.
    pub fn violations(&self, layer: usize) -> Vec<Violation> {
        let mut out = Vec::new();
        for f in 0..self.filters {
            for c in 0..self.channels {
                if let Some(w) = self.kernel_weights(f, c) {
                    if w.iter().any(|v| !v.is_finite()) {
                        out.push(Violation::at(layer, Some(f), Some(c), "non-finite weight"));
                    }
                }
            }
            if !self.bias[f].is_finite() {
                out.push(Violation::at(layer, Some(f), None, "non-finite bias"));
            }
        }
        if self.balanced {
            let counts: Vec<usize> = (0..self.filters).map(|f| self.retained_in_filter(f)).collect();
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            if lo != hi {
                out.push(Violation::at(
                    layer,
                    None,
                    None,
                    alloc::format!("balanced layer retains between {lo} and {hi} kernels per filter"),
                ));
            }
        }
        out
    }
}

fn layer_fingerprint(
    filters: usize,
    channels: usize,
    patterns: &PatternSet,
    ids: &[u8],
    weights: &[f32],
    bias: &[f32],
    balanced: bool,
) -> u64 {
    let mut h = Fnv64::default();
    h.write_u64(filters as u64);
    h.write_u64(channels as u64);
    for e in patterns.encodings() {
        h.write(&e.to_le_bytes());
    }
    h.write(ids);
    h.write_f32s(weights);
    h.write_f32s(bias);
    h.write(&[balanced as u8]);
    h.finish()
}

impl MacCount for PrunedConvLayer {
    fn macs_per_position(&self) -> u64 {
        (self.retained_kernels() * self.nonzeros()) as u64
    }

    fn kernel_dims(&self) -> (usize, usize) {
        (3, 3)
    }
}

pub fn to_dense(layer: &PrunedConvLayer) -> DenseConvLayer {
    layer.to_dense()
}

/// What the compiler needs to know about a pruned layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerInfo {
    pub filters: usize,
    pub channels: usize,
    /// Retained kernels per pattern id.
    pub histogram: Vec<u64>,
    /// Sorted pattern ids of each filter's retained kernels.
    pub signatures: Vec<Vec<u8>>,
    /// Retained channels of each filter, increasing.
    pub connectivity: Vec<Vec<u32>>,
    /// Kernel pattern ids of each retained channel, parallel to `connectivity`.
    pub kernel_patterns: Vec<Vec<u8>>,
    /// MACs per output position, per filter.
    pub filter_macs: Vec<u64>,
}

impl LayerInfo {
    pub fn macs_per_position(&self) -> u64 {
        self.filter_macs.iter().sum()
    }

    pub fn retained_kernels(&self) -> u64 {
        self.histogram.iter().sum()
    }
}

pub fn extract_layer_info(layer: &PrunedConvLayer) -> Result<LayerInfo> {
    let set_len = layer.patterns().len();
    let nz = layer.nonzeros() as u64;
    let mut histogram = vec![0u64; set_len];
    let mut signatures = Vec::with_capacity(layer.filters());
    let mut connectivity = Vec::with_capacity(layer.filters());
    let mut kernel_patterns = Vec::with_capacity(layer.filters());
    let mut filter_macs = Vec::with_capacity(layer.filters());
    for f in 0..layer.filters() {
        let mut sig = Vec::new();
        let mut chans = Vec::new();
        for c in 0..layer.channels() {
            let id = layer.pattern_id(f, c);
            if id == PRUNED {
                continue;
            }
            if id as usize >= set_len {
                return Err(err!(Validation, "filter {f} channel {c}: pattern id {id} out of range"));
            }
            histogram[id as usize] += 1;
            sig.push(id);
            chans.push(c as u32);
        }
        filter_macs.push(sig.len() as u64 * nz);
        kernel_patterns.push(sig.clone());
        sig.sort_unstable();
        signatures.push(sig);
        connectivity.push(chans);
    }
    Ok(LayerInfo {
        filters: layer.filters(),
        channels: layer.channels(),
        histogram,
        signatures,
        connectivity,
        kernel_patterns,
        filter_macs,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConvWeights {
    Dense(DenseConvLayer),
    Pruned(PrunedConvLayer),
}

impl ConvWeights {
    pub fn filters(&self) -> usize {
        match self {
            ConvWeights::Dense(d) => d.filters(),
            ConvWeights::Pruned(p) => p.filters(),
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            ConvWeights::Dense(d) => d.channels(),
            ConvWeights::Pruned(p) => p.channels(),
        }
    }

    pub fn kernel_dims(&self) -> (usize, usize) {
        match self {
            ConvWeights::Dense(d) => d.kernel_dims(),
            ConvWeights::Pruned(_) => (3, 3),
        }
    }

    pub fn macs_per_position(&self) -> u64 {
        match self {
            ConvWeights::Dense(d) => d.macs_per_position(),
            ConvWeights::Pruned(p) => p.macs_per_position(),
        }
    }

    pub fn to_dense(&self) -> DenseConvLayer {
        match self {
            ConvWeights::Dense(d) => d.clone(),
            ConvWeights::Pruned(p) => p.to_dense(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub spec: ConvSpec,
    pub weights: ConvWeights,
}

/// Fully connected layer over flattened `(c, h, w)` features.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(ConvLayer),
    Relu,
    MaxPool { size: usize, stride: usize },
    Dense(DenseLayer),
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv(ConvLayer { weights: ConvWeights::Dense(_), .. }) => "conv",
            Layer::Conv(ConvLayer { weights: ConvWeights::Pruned(_), .. }) => "pruned_conv",
            Layer::Relu => "relu",
            Layer::MaxPool { .. } => "max_pool",
            Layer::Dense(_) => "dense",
        }
    }
}

/// Per-sample activation shape `(c, h, w)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape3 {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape3 {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        Shape3 { c, h, w }
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A sequential network: one input, one output.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub input: Shape3,
    pub layers: Vec<Layer>,
}

impl ModelGraph {
    pub fn new(input: Shape3, layers: Vec<Layer>) -> Result<Self> {
        let m = ModelGraph { input, layers };
        m.shapes()?;
        Ok(m)
    }

    /// Input shape of every layer followed by the output shape.
    pub fn shapes(&self) -> Result<Vec<Shape3>> {
        if self.input.is_empty() {
            return Err(err!(Shape, "model input shape must be positive"));
        }
        let mut shapes = Vec::with_capacity(self.layers.len() + 1);
        let mut cur = self.input;
        shapes.push(cur);
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match layer {
                Layer::Conv(conv) => {
                    if conv.weights.channels() != cur.c {
                        return Err(err!(
                            Shape,
                            "layer {i}: expects {} channels, got {}",
                            conv.weights.channels(),
                            cur.c
                        ));
                    }
                    if conv.weights.kernel_dims() != (conv.spec.kernel_h, conv.spec.kernel_w) {
                        return Err(err!(Shape, "layer {i}: spec kernel does not match weights"));
                    }
                    let (h, w) = conv.spec.output_dims(cur.h, cur.w).map_err(|e| err!(Shape, "layer {i}: {e}"))?;
                    Shape3::new(conv.weights.filters(), h, w)
                }
                Layer::Relu => cur,
                Layer::MaxPool { size, stride } => {
                    if *size == 0 || *stride == 0 || cur.h < *size || cur.w < *size {
                        return Err(err!(Shape, "layer {i}: pool {size}/{stride} does not fit {}x{}", cur.h, cur.w));
                    }
                    Shape3::new(cur.c, (cur.h - size) / stride + 1, (cur.w - size) / stride + 1)
                }
                Layer::Dense(d) => {
                    if d.inputs != cur.len() {
                        return Err(err!(Shape, "layer {i}: dense expects {} features, got {}", d.inputs, cur.len()));
                    }
                    if d.weights.len() != d.inputs * d.outputs || d.bias.len() != d.outputs || d.outputs == 0 {
                        return Err(err!(Shape, "layer {i}: dense parameter lengths are inconsistent"));
                    }
                    Shape3::new(d.outputs, 1, 1)
                }
            };
            shapes.push(cur);
        }
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Result<Shape3> {
        Ok(*self.shapes()?.last().expect("non-empty"))
    }

    pub fn conv_layers(&self) -> impl Iterator<Item = (usize, &ConvLayer)> {
        self.layers.iter().enumerate().filter_map(|(i, l)| match l {
            Layer::Conv(c) => Some((i, c)),
            _ => None,
        })
    }
}

/// One broken invariant, located as precisely as possible.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub layer: Option<usize>,
    pub filter: Option<usize>,
    pub channel: Option<usize>,
    pub message: String,
}

impl Violation {
    fn at(layer: usize, filter: Option<usize>, channel: Option<usize>, message: impl Into<String>) -> Self {
        Violation { layer: Some(layer), filter, channel, message: message.into() }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(l) = self.layer {
            write!(f, "layer {l}")?;
        } else {
            write!(f, "model")?;
        }
        if let Some(x) = self.filter {
            write!(f, " filter {x}")?;
        }
        if let Some(c) = self.channel {
            write!(f, " channel {c}")?;
        }
        write!(f, ": {}", self.message)
    }
}

/// Every invariant violation in the model; empty iff the model is valid.
pub fn validate_model(model: &ModelGraph) -> Vec<Violation> {
    let mut out = Vec::new();
    if let Err(e) = model.shapes() {
        out.push(Violation { layer: None, filter: None, channel: None, message: alloc::format!("{e}") });
    }
    for (i, layer) in model.layers.iter().enumerate() {
        match layer {
            Layer::Conv(ConvLayer { weights: ConvWeights::Pruned(p), .. }) => out.extend(p.violations(i)),
            Layer::Dense(d) => {
                if d.weights.iter().chain(&d.bias).any(|v| !v.is_finite()) {
                    out.push(Violation::at(i, None, None, "non-finite dense parameter"));
                }
            }
            // Dense conv weights are checked finite at construction.
            Layer::Conv(_) | Layer::Relu | Layer::MaxPool { .. } => {}
        }
    }
    out
}

/// Runs the network with the dense reference convolution for every conv layer.
pub fn forward_reference(model: &ModelGraph, input: &Tensor4D) -> Result<Tensor4D> {
    check_input(model, input)?;
    let mut x = input.clone();
    for layer in &model.layers {
        x = match layer {
            Layer::Conv(conv) => conv2d_reference(&x, &conv.weights.to_dense(), &conv.spec)?,
            Layer::Relu => tensor::relu(&x),
            Layer::MaxPool { size, stride } => tensor::max_pool(&x, *size, *stride)?,
            Layer::Dense(d) => tensor::dense_forward(&x, &d.weights, &d.bias)?,
        };
    }
    Ok(x)
}

pub(crate) fn check_input(model: &ModelGraph, input: &Tensor4D) -> Result<()> {
    let [_, c, h, w] = input.dims();
    if Shape3::new(c, h, w) != model.input {
        return Err(err!(
            Shape,
            "input {c}x{h}x{w} does not match model input {}x{}x{}",
            model.input.c,
            model.input.h,
            model.input.w
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scp::canonical_scp_set;
    use crate::testutil::random_pruned;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn all_pattern_zero_histogram() {
        let layer =
            PrunedConvLayer::new(3, 5, canonical_scp_set(), vec![0; 15], vec![1.0; 60], vec![0.0; 3], true).unwrap();
        let info = extract_layer_info(&layer).unwrap();
        assert_eq!(info.histogram, vec![15, 0, 0, 0]);
        assert_eq!(info.macs_per_position(), 60);
    }

    #[test]
    fn half_pruned_histogram() {
        let ids: Vec<u8> = (0..16).map(|i| if i % 2 == 0 { PRUNED } else { (i % 4) as u8 }).collect();
        let layer = PrunedConvLayer::new(4, 4, canonical_scp_set(), ids, vec![0.5; 32], vec![0.0; 4], true).unwrap();
        let info = extract_layer_info(&layer).unwrap();
        assert_eq!(info.retained_kernels(), 8);
        assert_eq!(info.connectivity[0], vec![1, 3]);
    }

    #[test]
    fn histogram_matches_independent_tally() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let layer = random_pruned(&mut rng, 7, 9, 0.3);
            let info = extract_layer_info(&layer).unwrap();
            let mut tally = [0u64; 4];
            for &id in layer.pattern_ids() {
                if id != PRUNED {
                    tally[id as usize] += 1;
                }
            }
            assert_eq!(info.histogram, tally.to_vec());
            for f in 0..7 {
                assert_eq!(info.signatures[f].len(), layer.retained_in_filter(f));
                assert!(info.signatures[f].windows(2).all(|w| w[0] <= w[1]));
            }
        }
    }

    #[test]
    fn info_is_layout_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let layer = random_pruned(&mut rng, 6, 5, 0.2);
        let perm = vec![3, 0, 5, 1, 4, 2];
        let moved = layer.permute_filters(&perm).unwrap();
        let a = extract_layer_info(&layer).unwrap();
        let b = extract_layer_info(&moved).unwrap();
        assert_eq!(a.histogram, b.histogram);
        for (f, &to) in perm.iter().enumerate() {
            assert_eq!(a.signatures[f], b.signatures[to]);
            assert_eq!(a.connectivity[f], b.connectivity[to]);
        }
    }

    #[test]
    fn corrupted_ids_rejected() {
        let err = PrunedConvLayer::new(1, 2, canonical_scp_set(), vec![0, 7], vec![0.0; 8], vec![0.0], false);
        assert!(matches!(err, Err(crate::Error::Validation(_))));
        assert!(PrunedConvLayer::new(1, 2, canonical_scp_set(), vec![0, 1], vec![0.0; 7], vec![0.0], false).is_err());
    }

    #[test]
    fn to_dense_scatters_by_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layer = random_pruned(&mut rng, 4, 6, 0.25);
        let dense = layer.to_dense();
        for f in 0..4 {
            for c in 0..6 {
                let k = dense.kernel(f, c);
                match layer.pattern_id(f, c) {
                    PRUNED => assert!(k.iter().all(|&v| v == 0.0)),
                    id => {
                        let mask = layer.patterns().masks()[id as usize];
                        for (p, &v) in k.iter().enumerate() {
                            if !mask.contains(p / 3, p % 3) {
                                assert_eq!(v, 0.0);
                            }
                        }
                    }
                }
            }
        }
        let back = PrunedConvLayer::from_dense(&dense, layer.patterns(), &layer.assignment(), false).unwrap();
        assert_eq!(back, layer);
    }

    #[test]
    fn permutations_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layer = random_pruned(&mut rng, 5, 4, 0.2);
        let perm = vec![2, 0, 3, 1];
        let inv = vec![1, 3, 0, 2];
        assert_eq!(layer.permute_channels(&perm).unwrap().permute_channels(&inv).unwrap(), layer);
        let ident: Vec<usize> = (0..5).collect();
        assert_eq!(layer.permute_filters(&ident).unwrap(), layer);
        assert!(layer.permute_channels(&[0, 0, 1, 2]).is_err());
    }

    #[test]
    fn validation_reports() {
        let set = canonical_scp_set();
        let good =
            PrunedConvLayer::new(2, 2, set.clone(), vec![0, 1, 2, 3], vec![0.1; 16], vec![0.0; 2], true).unwrap();
        let model = |p: PrunedConvLayer| {
            ModelGraph::new(
                Shape3::new(2, 4, 4),
                vec![Layer::Conv(ConvLayer { spec: ConvSpec::same3x3(), weights: ConvWeights::Pruned(p) })],
            )
            .unwrap()
        };
        assert!(validate_model(&model(good)).is_empty());

        let unbalanced =
            PrunedConvLayer::new(2, 2, set.clone(), vec![0, PRUNED, 2, 3], vec![0.1; 12], vec![0.0; 2], true).unwrap();
        assert_eq!(validate_model(&model(unbalanced)).len(), 1);

        let mut w = vec![0.1; 16];
        w[5] = f32::NAN;
        let nan = PrunedConvLayer::new(2, 2, set, vec![0, 1, 2, 3], w, vec![0.0; 2], true).unwrap();
        let v = validate_model(&model(nan));
        assert_eq!(v.len(), 1);
        assert_eq!((v[0].layer, v[0].filter, v[0].channel), (Some(0), Some(0), Some(1)));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let m = ModelGraph {
            input: Shape3::new(3, 4, 4),
            layers: vec![Layer::Dense(DenseLayer {
                inputs: 10,
                outputs: 2,
                weights: vec![0.0; 20],
                bias: vec![0.0; 2],
            })],
        };
        assert_eq!(validate_model(&m).len(), 1);
        assert!(ModelGraph::new(m.input, m.layers.clone()).is_err());
    }
}
