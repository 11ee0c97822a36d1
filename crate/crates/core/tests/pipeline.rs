use pconv_core::compiler::compile_network;
use pconv_core::exec::run_network;
use pconv_core::model::{forward_reference, ConvWeights};
use pconv_core::prune::{compression_stats, magnitude_prune, KeepRatio, PruneConfig};
use pconv_core::tensor::Tensor4D;
use pconv_core::train::toy_cnn;
use pconv_core::util::max_rel_diff;
use proptest::prelude::*;

fn input(seed: u64, n: usize) -> Tensor4D {
    let mut s = seed | 1;
    let data = (0..n * 2 * 16 * 16)
        .map(|_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 40) as f32 / (1u64 << 23) as f32 - 1.0
        })
        .collect();
    Tensor4D::new(n, 2, 16, 16, data).unwrap()
}

#[test]
fn prune_compile_run_matches_reference() {
    let cfg = PruneConfig { keep_ratio: KeepRatio::new(1, 2).unwrap(), ..Default::default() };
    let model = magnitude_prune(&toy_cnn(1), &cfg).unwrap();
    let (total, layers) = compression_stats(&model).unwrap();
    assert_eq!(layers.len(), 2);
    assert_eq!(*total.combined_factor.numer() * 2, *total.combined_factor.denom() * 9);
    for threads in [1, 3] {
        let plans = compile_network(&model, threads).unwrap();
        let x = input(7, 3);
        let y = run_network(&model, &plans, &x).unwrap();
        assert!(max_rel_diff(y.data(), forward_reference(&model, &x).unwrap().data()) <= 1e-5);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn any_keep_ratio_runs_like_reference(seed in any::<u64>(), keep in 1u64..=8, k in prop::sample::select(vec![4usize, 8, 12]), balanced in any::<bool>()) {
        let cfg = PruneConfig { pattern_count: k, keep_ratio: KeepRatio::new(keep, 8).unwrap(), balanced, ..Default::default() };
        let model = match magnitude_prune(&toy_cnn(seed), &cfg) {
            Ok(m) => m,
            Err(e) => {
                // Only balanced pruning of the 2-channel first conv down to nothing may fail.
                prop_assert!(balanced && cfg.keep_ratio.retained_of(2) == 0, "{}", e);
                return Ok(());
            }
        };
        for (_, conv) in model.conv_layers() {
            let ConvWeights::Pruned(p) = &conv.weights else { panic!("conv left dense") };
            let expected = if balanced {
                p.filters() * cfg.keep_ratio.retained_of(p.channels())
            } else {
                cfg.keep_ratio.retained_of(p.filters() * p.channels())
            };
            prop_assert_eq!(p.retained_kernels(), expected);
        }
        let plans = compile_network(&model, 2).unwrap();
        let x = input(seed, 1);
        let y = run_network(&model, &plans, &x).unwrap();
        prop_assert!(max_rel_diff(y.data(), forward_reference(&model, &x).unwrap().data()) <= 1e-5);
    }
}
