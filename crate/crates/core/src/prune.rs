//! Pattern and connectivity pruning by magnitude, plus compression accounting.
//!
//! Pattern pruning projects every 3x3 kernel onto the pattern that keeps the
//! most squared magnitude. Connectivity pruning then removes whole kernels
//! by L2 norm. Ties always go to the lowest index.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use num_rational::Ratio;

use crate::model::{ConvLayer, ConvWeights, Layer, ModelGraph, PatternAssignment, PrunedConvLayer, PRUNED};
use crate::scp::{extended_scp_set, PatternSet};
use crate::tensor::DenseConvLayer;
use crate::{err, Error, Result};

/// Fraction of kernels kept per filter, held as an exact rational in `(0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct KeepRatio(Ratio<u64>);

impl KeepRatio {
    pub fn new(numer: u64, denom: u64) -> Result<Self> {
        if denom == 0 || numer == 0 || numer > denom {
            return Err(err!(Config, "keep ratio must lie in (0, 1], got {numer}/{denom}"));
        }
        Ok(KeepRatio(Ratio::new(numer, denom)))
    }

    pub fn one() -> Self {
        KeepRatio(Ratio::from_integer(1))
    }

    pub fn ratio(&self) -> Ratio<u64> {
        self.0
    }

    pub fn as_f64(&self) -> f64 {
        *self.0.numer() as f64 / *self.0.denom() as f64
    }

    /// `round(total * ratio)`, halves rounded up, computed exactly.
    pub fn retained_of(&self, total: usize) -> usize {
        let (n, d) = (*self.0.numer(), *self.0.denom());
        ((2 * total as u64 * n + d) / (2 * d)) as usize
    }
}

impl fmt::Display for KeepRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if *self.0.denom() == 1 {
            write!(f, "{}", self.0.numer())
        } else {
            write!(f, "{}/{}", self.0.numer(), self.0.denom())
        }
    }
}

/// Accepts `"a/b"` or a plain decimal such as `"0.5"`, parsed exactly.
impl FromStr for KeepRatio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || err!(Config, "cannot parse keep ratio {s:?}");
        if let Some((a, b)) = s.split_once('/') {
            let a = a.trim().parse::<u64>().map_err(|_| bad())?;
            let b = b.trim().parse::<u64>().map_err(|_| bad())?;
            return KeepRatio::new(a, b);
        }
        let (int, frac) = s.split_once('.').unwrap_or((s, ""));
        if frac.len() > 12 || (int.is_empty() && frac.is_empty()) {
            return Err(bad());
        }
        let digits = |t: &str| -> Result<u64> {
            if t.is_empty() {
                Ok(0)
            } else if t.bytes().all(|b| b.is_ascii_digit()) {
                t.parse::<u64>().map_err(|_| bad())
            } else {
                Err(bad())
            }
        };
        let denom = 10u64.pow(frac.len() as u32);
        let numer = digits(int)?.checked_mul(denom).ok_or_else(bad)? + digits(frac)?;
        KeepRatio::new(numer, denom)
    }
}

/// Projects a 3x3 kernel onto the pattern keeping the largest squared
/// magnitude; the lowest id wins ties.
pub fn project_kernel(kernel: &[f32; 9], set: &PatternSet) -> (u8, [f32; 9]) {
    let mut best = (0u8, f64::NEG_INFINITY);
    for mask in set.masks() {
        let score = retained_energy(kernel, mask.encoded());
        if score > best.1 {
            best = (mask.id(), score);
        }
    }
    let mask = set.masks()[best.0 as usize].encoded();
    let mut out = [0.0f32; 9];
    for (i, o) in out.iter_mut().enumerate() {
        if mask >> i & 1 == 1 {
            *o = kernel[i];
        }
    }
    (best.0, out)
}

fn retained_energy(kernel: &[f32; 9], mask: u16) -> f64 {
    let mut s = 0.0f64;
    for (i, &v) in kernel.iter().enumerate() {
        if mask >> i & 1 == 1 {
            s += f64::from(v) * f64::from(v);
        }
    }
    s
}

fn kernel_array(k: &[f32]) -> [f32; 9] {
    k.try_into().expect("3x3 kernel")
}

/// Projects every kernel of a 3x3 layer; nothing is removed yet.
pub fn pattern_prune_layer(layer: &DenseConvLayer, set: &PatternSet) -> Result<(PrunedConvLayer, PatternAssignment)> {
    let assignment = pattern_assignment(layer, set)?;
    let pruned = PrunedConvLayer::from_dense(layer, set, &assignment, true)?;
    Ok((pruned, assignment))
}

fn pattern_assignment(layer: &DenseConvLayer, set: &PatternSet) -> Result<PatternAssignment> {
    if layer.kernel_dims() != (3, 3) {
        let (kh, kw) = layer.kernel_dims();
        return Err(Error::UnsupportedShape { kh, kw });
    }
    let mut ids = Vec::with_capacity(layer.filters() * layer.channels());
    for f in 0..layer.filters() {
        for c in 0..layer.channels() {
            ids.push(project_kernel(&kernel_array(layer.kernel(f, c)), set).0);
        }
    }
    Ok(PatternAssignment { filters: layer.filters(), channels: layer.channels(), ids })
}

/// Chooses which kernels survive from their squared L2 norms (`filters x channels`).
///
/// Balanced: every filter keeps `round(channels * keep)` kernels. Otherwise
/// the layer as a whole keeps `round(filters * channels * keep)`.
pub fn select_kernels(
    norms_sq: &[f64],
    filters: usize,
    channels: usize,
    keep: KeepRatio,
    balanced: bool,
) -> Result<Vec<bool>> {
    if norms_sq.len() != filters * channels {
        return Err(err!(Shape, "expected {} kernel norms, got {}", filters * channels, norms_sq.len()));
    }
    let mut kept = vec![false; norms_sq.len()];
    let by_norm = |a: &usize, b: &usize| norms_sq[*b].total_cmp(&norms_sq[*a]).then(a.cmp(b));
    if balanced {
        let per_filter = keep.retained_of(channels);
        if per_filter == 0 {
            return Err(err!(Config, "keep ratio {keep} retains no kernels of {channels} channels"));
        }
        for f in 0..filters {
            let mut idx: Vec<usize> = (f * channels..(f + 1) * channels).collect();
            idx.sort_by(by_norm);
            for &i in &idx[..per_filter] {
                kept[i] = true;
            }
        }
    } else {
        let total = keep.retained_of(filters * channels);
        let mut idx: Vec<usize> = (0..norms_sq.len()).collect();
        idx.sort_by(by_norm);
        for &i in &idx[..total] {
            kept[i] = true;
        }
    }
    Ok(kept)
}

/// Connectivity pruning of an already pattern-pruned layer. Kernels that
/// are already removed stay removed.
pub fn connectivity_prune(layer: &PrunedConvLayer, keep: KeepRatio, balanced: bool) -> Result<PatternAssignment> {
    let mut norms = Vec::with_capacity(layer.filters() * layer.channels());
    for f in 0..layer.filters() {
        for c in 0..layer.channels() {
            norms.push(match layer.kernel_weights(f, c) {
                Some(w) => w.iter().map(|&v| f64::from(v) * f64::from(v)).sum(),
                None => f64::NEG_INFINITY,
            });
        }
    }
    let kept = select_kernels(&norms, layer.filters(), layer.channels(), keep, balanced)?;
    let mut assignment = layer.assignment();
    for (id, k) in assignment.ids.iter_mut().zip(kept) {
        if !k {
            *id = PRUNED;
        }
    }
    Ok(assignment)
}

/// Pattern projection followed by connectivity pruning: the Euclidean
/// projection used by both the magnitude method and ADMM.
pub fn prune_layer(
    layer: &DenseConvLayer,
    set: &PatternSet,
    keep: KeepRatio,
    balanced: bool,
) -> Result<PrunedConvLayer> {
    let (patterned, _) = pattern_prune_layer(layer, set)?;
    let assignment = connectivity_prune(&patterned, keep, balanced)?;
    PrunedConvLayer::from_dense(layer, set, &assignment, balanced)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PruneMethod {
    Magnitude,
    Admm,
}

impl FromStr for PruneMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "magnitude" => Ok(PruneMethod::Magnitude),
            "admm" => Ok(PruneMethod::Admm),
            other => Err(err!(Config, "unknown prune method {other:?} (expected magnitude or admm)")),
        }
    }
}

/// Hyperparameters of the ADMM loop and the training around it.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmmConfig {
    pub rho: f32,
    pub rounds: usize,
    pub epochs_per_round: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub finetune_epochs: usize,
    pub seed: u64,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        AdmmConfig {
            rho: 1e-3,
            rounds: 3,
            epochs_per_round: 2,
            learning_rate: 0.02,
            momentum: 0.9,
            batch_size: 32,
            finetune_epochs: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneConfig {
    /// Size of the pattern library (4, 8 or 12 in the usual sweeps).
    pub pattern_count: usize,
    /// Explicit library; overrides `pattern_count` when set.
    pub patterns: Option<PatternSet>,
    pub keep_ratio: KeepRatio,
    /// Per-layer overrides of `keep_ratio`, by layer index in the model.
    pub layer_keep: Vec<(usize, KeepRatio)>,
    pub balanced: bool,
    pub method: PruneMethod,
    pub admm: AdmmConfig,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            pattern_count: 4,
            patterns: None,
            keep_ratio: KeepRatio::one(),
            layer_keep: Vec::new(),
            balanced: true,
            method: PruneMethod::Magnitude,
            admm: AdmmConfig::default(),
        }
    }
}

impl PruneConfig {
    pub fn keep_for(&self, layer: usize) -> KeepRatio {
        self.layer_keep.iter().rev().find(|(i, _)| *i == layer).map_or(self.keep_ratio, |(_, k)| *k)
    }

    pub fn pattern_set(&self) -> Result<PatternSet> {
        match &self.patterns {
            Some(set) => Ok(set.clone()),
            None => extended_scp_set(self.pattern_count),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.pattern_set()?;
        let a = &self.admm;
        if !(a.rho >= 0.0 && a.rho.is_finite()) {
            return Err(err!(Config, "rho must be finite and non-negative"));
        }
        if !(a.learning_rate >= 0.0 && a.learning_rate.is_finite()) || !(0.0..1.0).contains(&a.momentum) {
            return Err(err!(Config, "learning rate must be non-negative and momentum in [0, 1)"));
        }
        if a.batch_size == 0 {
            return Err(err!(Config, "batch size must be positive"));
        }
        Ok(())
    }
}

/// Magnitude pruning of every dense 3x3 conv layer; other layers pass through.
pub fn magnitude_prune(model: &ModelGraph, config: &PruneConfig) -> Result<ModelGraph> {
    config.validate()?;
    let set = config.pattern_set()?;
    let mut layers = Vec::with_capacity(model.layers.len());
    for (i, layer) in model.layers.iter().enumerate() {
        layers.push(match layer {
            Layer::Conv(ConvLayer { spec, weights: ConvWeights::Dense(d) }) if d.kernel_dims() == (3, 3) => {
                let pruned = prune_layer(d, &set, config.keep_for(i), config.balanced)?;
                Layer::Conv(ConvLayer { spec: *spec, weights: ConvWeights::Pruned(pruned) })
            }
            other => other.clone(),
        });
    }
    ModelGraph::new(model.input, layers)
}

/// Factor of one layer or the whole model; exact rationals.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompressionReport {
    /// MACs of the retained kernels if dense, over MACs actually executed.
    pub pattern_factor: Ratio<u64>,
    /// All dense MACs over the MACs of the retained kernels if dense.
    pub connectivity_factor: Ratio<u64>,
    pub combined_factor: Ratio<u64>,
    pub dense_weights: u64,
    pub pruned_weights: u64,
    pub dense_macs: u64,
    pub pruned_macs: u64,
}

impl CompressionReport {
    fn from_counts(
        dense_macs: u64,
        retained_dense_macs: u64,
        pruned_macs: u64,
        dense_w: u64,
        pruned_w: u64,
    ) -> Result<Self> {
        if pruned_macs == 0 || retained_dense_macs == 0 {
            return Err(err!(Domain, "every kernel is pruned; compression factors are unbounded"));
        }
        Ok(CompressionReport {
            pattern_factor: Ratio::new(retained_dense_macs, pruned_macs),
            connectivity_factor: Ratio::new(dense_macs, retained_dense_macs),
            combined_factor: Ratio::new(dense_macs, pruned_macs),
            dense_weights: dense_w,
            pruned_weights: pruned_w,
            dense_macs,
            pruned_macs,
        })
    }
}

/// Per-layer and whole-model compression of the conv layers, batch size 1.
pub fn compression_stats(model: &ModelGraph) -> Result<(CompressionReport, Vec<(usize, CompressionReport)>)> {
    let shapes = model.shapes()?;
    let mut per_layer = Vec::new();
    let (mut d, mut rd, mut p, mut dw, mut pw) = (0u64, 0u64, 0u64, 0u64, 0u64);
    for (i, conv) in model.conv_layers() {
        let out = shapes[i + 1];
        let positions = (out.h * out.w) as u64;
        let (kh, kw) = conv.weights.kernel_dims();
        let ksize = (kh * kw) as u64;
        let (f, c) = (conv.weights.filters() as u64, conv.weights.channels() as u64);
        let retained = match &conv.weights {
            ConvWeights::Dense(_) => f * c,
            ConvWeights::Pruned(pl) => pl.retained_kernels() as u64,
        };
        let per_pos = conv.weights.macs_per_position();
        let layer = CompressionReport::from_counts(
            positions * f * c * ksize,
            positions * retained * ksize,
            positions * per_pos,
            f * c * ksize,
            per_pos,
        )?;
        d += layer.dense_macs;
        rd += positions * retained * ksize;
        p += layer.pruned_macs;
        dw += layer.dense_weights;
        pw += layer.pruned_weights;
        per_layer.push((i, layer));
    }
    if per_layer.is_empty() {
        return Err(err!(Validation, "model has no conv layers"));
    }
    Ok((CompressionReport::from_counts(d, rd, p, dw, pw)?, per_layer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Shape3, PRUNED};
    use crate::scp::canonical_scp_set;
    use crate::tensor::{ConvSpec, MacCount};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cross_kernel(top: f32, left: f32, right: f32, bottom: f32, center: f32) -> [f32; 9] {
        [0.0, top, 0.0, left, center, right, 0.0, bottom, 0.0]
    }

    /// Independent oracle: every mask's full-kernel energy with zeros multiplied in.
    fn brute_force(kernel: &[f32; 9], set: &PatternSet) -> u8 {
        let mut best_id = 0;
        let mut best = f64::NEG_INFINITY;
        for (id, m) in set.masks().iter().enumerate() {
            let bits = m.bits();
            let mut e = 0.0f64;
            for r in 0..3 {
                for c in 0..3 {
                    let keep = if bits[r][c] { 1.0 } else { 0.0 };
                    let v = f64::from(kernel[r * 3 + c]) * keep;
                    e += v * v;
                }
            }
            if e > best {
                best = e;
                best_id = id;
            }
        }
        best_id as u8
    }

    #[test]
    fn projection_drops_weakest_arm() {
        let (id, out) = project_kernel(&cross_kernel(0.9, 0.8, 0.7, 0.6, 1.0), &canonical_scp_set());
        assert_eq!(id, 3);
        assert_eq!(out, cross_kernel(0.9, 0.8, 0.7, 0.0, 1.0));
    }

    #[test]
    fn projection_idempotent_on_supported_kernel() {
        let k = cross_kernel(0.3, -0.5, 0.0, 0.2, 0.4);
        let (id, out) = project_kernel(&k, &canonical_scp_set());
        assert_eq!(id, 2);
        assert_eq!(out, k);
        assert_eq!(project_kernel(&out, &canonical_scp_set()), (id, out));
    }

    #[test]
    fn projection_tie_goes_to_lowest_id() {
        assert_eq!(project_kernel(&[0.5; 9], &canonical_scp_set()).0, 0);
        assert_eq!(project_kernel(&[0.0; 9], &canonical_scp_set()).0, 0);
    }

    #[test]
    fn projection_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for count in [4, 8, 12] {
            let set = extended_scp_set(count).unwrap();
            for _ in 0..2000 {
                let k: [f32; 9] = core::array::from_fn(|_| rng.gen_range(-1.0..1.0));
                let (id, out) = project_kernel(&k, &set);
                assert_eq!(id, brute_force(&k, &set));
                let n_in: f64 = k.iter().map(|&v| f64::from(v).powi(2)).sum();
                let n_out: f64 = out.iter().map(|&v| f64::from(v).powi(2)).sum();
                assert!(n_out <= n_in);
                assert_eq!(project_kernel(&out, &set), (id, out));
            }
        }
    }

    fn random_dense(rng: &mut ChaCha8Rng, f: usize, c: usize) -> DenseConvLayer {
        let w = (0..f * c * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        DenseConvLayer::new(f, c, 3, 3, w, vec![0.0; f]).unwrap()
    }

    #[test]
    fn pattern_prune_layer_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dense = random_dense(&mut rng, 8, 6);
        let set = canonical_scp_set();
        let (pruned, assignment) = pattern_prune_layer(&dense, &set).unwrap();
        assert_eq!(assignment.ids.len(), 48);
        let back = pruned.to_dense();
        for f in 0..8 {
            for c in 0..6 {
                assert_eq!(back.kernel(f, c).iter().filter(|&&v| v != 0.0).count(), 4);
            }
        }
        let spec = ConvSpec::same3x3();
        let ratio = Ratio::new(dense.mac_count(&spec, 1, 10, 10).unwrap(), pruned.mac_count(&spec, 1, 10, 10).unwrap());
        assert_eq!(ratio, Ratio::new(9, 4));
        let (again, assignment2) = pattern_prune_layer(&back, &set).unwrap();
        assert_eq!(assignment2, assignment);
        assert_eq!(again.weights(), pruned.weights());

        let five = DenseConvLayer::new(1, 1, 5, 5, vec![0.0; 25], vec![0.0]).unwrap();
        assert!(matches!(pattern_prune_layer(&five, &set), Err(Error::UnsupportedShape { kh: 5, kw: 5 })));
    }

    #[test]
    fn connectivity_by_norm() {
        let kept = select_kernels(&[0.25, 0.01, 0.81, 0.09], 1, 4, KeepRatio::new(1, 2).unwrap(), true).unwrap();
        assert_eq!(kept, vec![true, false, true, false]);
        let kept = select_kernels(&[1.0, 1.0, 1.0, 1.0], 1, 4, KeepRatio::new(1, 2).unwrap(), true).unwrap();
        assert_eq!(kept, vec![true, true, false, false]);
        assert!(select_kernels(&[1.0; 4], 1, 4, KeepRatio::new(1, 10).unwrap(), true).is_err());
    }

    #[test]
    fn connectivity_keep_all_and_balance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dense = random_dense(&mut rng, 10, 8);
        let (p, _) = pattern_prune_layer(&dense, &canonical_scp_set()).unwrap();
        let all = connectivity_prune(&p, KeepRatio::one(), true).unwrap();
        assert!(all.ids.iter().all(|&id| id != PRUNED));
        for keep in [KeepRatio::new(1, 2).unwrap(), KeepRatio::new(3, 8).unwrap(), KeepRatio::new(1, 8).unwrap()] {
            let a = connectivity_prune(&p, keep, true).unwrap();
            let counts: Vec<usize> = (0..10).map(|f| a.retained_in_filter(f)).collect();
            assert!(counts.iter().all(|&n| n == keep.retained_of(8)));
            let u = connectivity_prune(&p, keep, false).unwrap();
            assert_eq!(u.retained(), keep.retained_of(80));
        }
        assert!(KeepRatio::new(0, 1).is_err());
        assert!(KeepRatio::new(3, 2).is_err());
    }

    #[test]
    fn keep_ratio_parsing() {
        assert_eq!("0.5".parse::<KeepRatio>().unwrap(), KeepRatio::new(1, 2).unwrap());
        assert_eq!("1/3".parse::<KeepRatio>().unwrap(), KeepRatio::new(1, 3).unwrap());
        assert_eq!("1".parse::<KeepRatio>().unwrap(), KeepRatio::one());
        assert_eq!("0.125".parse::<KeepRatio>().unwrap().retained_of(64), 8);
        assert!("1.5".parse::<KeepRatio>().is_err());
        assert!("0".parse::<KeepRatio>().is_err());
        assert!("abc".parse::<KeepRatio>().is_err());
        assert_eq!(KeepRatio::new(1, 2).unwrap().retained_of(1), 1);
    }

    fn one_layer_model(layer: DenseConvLayer) -> ModelGraph {
        ModelGraph::new(
            Shape3::new(layer.channels(), 8, 8),
            vec![Layer::Conv(ConvLayer { spec: ConvSpec::same3x3(), weights: ConvWeights::Dense(layer) })],
        )
        .unwrap()
    }

    #[test]
    fn compression_factors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dense_model = one_layer_model(random_dense(&mut rng, 4, 62));
        let (r, _) = compression_stats(&dense_model).unwrap();
        assert_eq!(
            (r.pattern_factor, r.connectivity_factor, r.combined_factor),
            (Ratio::from(1), Ratio::from(1), Ratio::from(1))
        );

        let cfg = PruneConfig::default();
        let (r, _) = compression_stats(&magnitude_prune(&dense_model, &cfg).unwrap()).unwrap();
        assert_eq!(r.pattern_factor, Ratio::new(9, 4));
        assert_eq!(r.connectivity_factor, Ratio::from(1));

        // 62 channels keeping 20 per filter: connectivity 3.1, combined 6.975.
        let cfg = PruneConfig { keep_ratio: KeepRatio::new(10, 31).unwrap(), ..PruneConfig::default() };
        let (r, layers) = compression_stats(&magnitude_prune(&dense_model, &cfg).unwrap()).unwrap();
        assert_eq!(r.connectivity_factor, Ratio::new(31, 10));
        assert_eq!(r.combined_factor, Ratio::new(6975, 1000));
        assert_eq!(r.combined_factor, r.pattern_factor * r.connectivity_factor);
        assert_eq!(r.pruned_weights, 4 * 20 * 4);
        assert_eq!(layers.len(), 1);
    }

    #[test]
    fn config_overrides_and_validation() {
        let mut cfg = PruneConfig::default();
        cfg.layer_keep.push((2, KeepRatio::new(1, 4).unwrap()));
        assert_eq!(cfg.keep_for(2), KeepRatio::new(1, 4).unwrap());
        assert_eq!(cfg.keep_for(0), KeepRatio::one());
        cfg.pattern_count = 3;
        assert!(cfg.validate().is_err());
        assert!("sgd".parse::<PruneMethod>().is_err());
    }
}
