use pconv::format::{decode_container, encode_container};
use pconv::patterns::{PatternManifest, SUPPORTED_COUNTS};
use pconv::plan_io::{plan_from_json, plan_to_json};
use pconv::tensor_io::{decode_tensor, encode_tensor};
use pconv_core::compiler::compile_network;
use pconv_core::model::{ConvLayer, ConvWeights, DenseLayer, Layer, ModelGraph, Shape3};
use pconv_core::prune::{magnitude_prune, KeepRatio, PruneConfig};
use pconv_core::scp::extended_scp_set;
use pconv_core::tensor::{ConvSpec, DenseConvLayer, Tensor4D};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Conv, relu, optional pool, conv, dense; convs pruned when `prune` is set.
fn random_model(seed: u64, prune: bool) -> ModelGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, h, w) = (rng.gen_range(1..=4), rng.gen_range(4..=10), rng.gen_range(4..=10));
    let (f1, f2) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
    let mut conv = |f: usize, c: usize, stride: usize| {
        let weights = (0..f * c * 9).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let bias = (0..f).map(|_| rng.gen_range(-0.1f32..0.1)).collect();
        let weights = ConvWeights::Dense(DenseConvLayer::new(f, c, 3, 3, weights, bias).unwrap());
        Layer::Conv(ConvLayer { spec: ConvSpec::new(stride, 1, 3, 3).unwrap(), weights })
    };
    let mut layers = vec![conv(f1, c, 1), Layer::Relu];
    let pool = seed.is_multiple_of(2);
    if pool {
        layers.push(Layer::MaxPool { size: 2, stride: 2 });
    }
    layers.push(conv(f2, f1, 1 + usize::from(seed.is_multiple_of(3))));
    let shape = ModelGraph::new(Shape3::new(c, h, w), layers.clone()).unwrap().output_shape().unwrap();
    let outputs = rng.gen_range(1..=5);
    let weights = (0..shape.len() * outputs).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    layers.push(Layer::Dense(DenseLayer { inputs: shape.len(), outputs, weights, bias: vec![0.5; outputs] }));
    let model = ModelGraph::new(Shape3::new(c, h, w), layers).unwrap();
    if !prune {
        return model;
    }
    let cfg = PruneConfig {
        pattern_count: [4, 8, 12][(seed % 3) as usize],
        keep_ratio: KeepRatio::new(rng.gen_range(1..=4), 4).unwrap(),
        balanced: false,
        ..Default::default()
    };
    magnitude_prune(&model, &cfg).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn model_round_trip(seed in any::<u64>(), prune in any::<bool>()) {
        let model = random_model(seed, prune);
        let bytes = encode_container(&model).unwrap();
        let back = decode_container(&bytes).unwrap();
        prop_assert_eq!(&back, &model);
        prop_assert_eq!(encode_container(&back).unwrap(), bytes);
    }

    #[test]
    fn truncated_model_is_rejected(seed in any::<u64>(), cut in 0.0f64..1.0) {
        let bytes = encode_container(&random_model(seed, true)).unwrap();
        let len = (cut * bytes.len() as f64) as usize;
        prop_assert!(decode_container(&bytes[..len]).is_err());
    }

    #[test]
    fn tensor_round_trip(n in 1usize..3, c in 1usize..4, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * c * h * w).map(|_| rng.gen_range(-1e6f32..1e6)).collect();
        let t = Tensor4D::new(n, c, h, w, data).unwrap();
        let bytes = encode_tensor(&t).unwrap();
        prop_assert_eq!(bytes.len(), 16 + 4 * n * c * h * w);
        prop_assert_eq!(decode_tensor(&bytes).unwrap(), t);
        prop_assert!(decode_tensor(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn plan_round_trip(seed in any::<u64>(), threads in 1usize..6) {
        let model = random_model(seed, true);
        let plan = compile_network(&model, threads).unwrap();
        prop_assert_eq!(plan_from_json(&plan_to_json(&plan)).unwrap(), plan);
    }
}

#[test]
fn pattern_manifest_round_trip() {
    for k in SUPPORTED_COUNTS {
        let set = extended_scp_set(k).unwrap();
        let manifest = PatternManifest::from_set(&set);
        let back = PatternManifest::from_toml(&manifest.to_toml()).unwrap();
        assert_eq!(back.to_set().unwrap(), set);
    }
    assert!(PatternManifest::from_toml("k = 2\nencodings = [184, 178, 154]\n").unwrap().to_set().is_err());
    assert!(PatternManifest::from_toml("k = 1\nencodings = [184]\nextra = 1\n").is_err());
}
